"""Toy-scale FedSTO: selective training and orthogonal enhancement for federated semi-supervised detection."""

from .config import Config, load_config, parse_config
from .federation import RunReport, RunResult, run_fedsto
from .model import ArchConfig, ParamSet, decode, init_model, predict

__all__ = ["ArchConfig", "Config", "ParamSet", "RunReport", "RunResult", "decode", "init_model", "load_config",
           "parse_config", "predict", "run_fedsto"]

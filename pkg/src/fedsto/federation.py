"""FedSTO round engine: warm-up, selective backbone training, orthogonal full training.

Round structure (global round counter ``t`` runs through all three stages)::

    warm-up   : server supervised epoch
    phase 1   : sample -> broadcast -> client backbone update -> upload
                -> aggregate(backbone) -> server update
    phase 2   : sample -> broadcast -> client orthogonal update -> upload
                -> aggregate(all) -> server orthogonal update

Everything is a pure function of (config, seed). Client randomness comes from
a private stream keyed by (seed, client id, round), and aggregation sums
in an order fixed by the uploaded contents.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from . import comm
from .autodiff import Graph, run
from .config import Config
from .evaluation import evaluate_detections
from .losses import (LossBreakdown, LossWeights, breakdown, detection_terms, orthogonality_graph,
                     supervised_targets, unsupervised_targets, weighted_total)
from .model import (ArchConfig, ParamSet, build_forward, decode, init_model, param_inputs, predict)
from .pseudo import EmaState, ema_update, labels_from_predictions, reinit_ema
from .synth import (CLIENT_DOMAINS, SERVER_DOMAIN, Domain, LabeledData, UnlabeledData, default_shift, labeled,
                    materialize, partition_clients, unlabeled)
from .theory import penalty_trace_lowrank

WARMUP, PHASE1, PHASE2 = "warmup", "phase1", "phase2"
TEST_ID_OFFSET = 10_000_000
F64 = np.float64

Observer = Callable[..., None]


@dataclass
class ServerState:
    params: ParamSet
    data: LabeledData
    round: int = 0
    phase: str = WARMUP


@dataclass
class ClientState:
    cid: int
    data: UnlabeledData
    params: ParamSet
    ema: EmaState
    domains: tuple[Domain, ...]


@dataclass(frozen=True)
class TrainSettings:
    """Everything a local optimisation loop needs, pulled out of Config."""

    arch: ArchConfig
    weights: LossWeights
    lr: float
    batch_size: int
    local_epochs: int
    power_iterations: int
    cls_loss: str
    focal_gamma: float
    tau1: float
    tau2: float
    nms_iou: float
    aug_noise: float
    labeler: str

    @classmethod
    def from_config(cls, cfg: Config) -> "TrainSettings":
        f, lo, p = cfg.federation, cfg.losses, cfg.pseudo
        return cls(cfg.model, lo.weights(), f.lr, f.batch_size, f.local_epochs, lo.power_iterations,
                   lo.cls_loss, lo.focal_gamma, p.tau1, p.tau2, p.nms_iou, cfg.data.aug_noise, p.labeler)


# --------------------------------------------------------------------------
# local optimisation
# --------------------------------------------------------------------------

def loss_and_grads(st: TrainSettings, params: ParamSet, images: np.ndarray, targets, trainable: list[str],
                   orthogonal: bool) -> tuple[dict[str, np.ndarray], LossBreakdown]:
    g = Graph()
    p = param_inputs(g, params, trainable)
    x = g.input("__images__", images.shape, grad=False)
    pred = build_forward(g, st.arch, p, x)
    terms = detection_terms(g, pred, targets, st.cls_loss, st.focal_gamma)
    orn = None
    if orthogonal:
        orn = orthogonality_graph(g, {n: p[n] for n in params.names("non_backbone")}, st.power_iterations)
    weights = st.weights if orthogonal else LossWeights(st.weights.cls, st.weights.obj, st.weights.reg, 0.0)
    total = weighted_total(g, terms, weights, orn)
    inputs = dict(params.entries)
    inputs["__images__"] = images
    tr = run(g, inputs, root=total, wrt=trainable)
    vals = {k: float(tr[v]) for k, v in terms.items()}
    vals["orn"] = float(tr[orn]) if orn is not None else 0.0
    return tr.gradients, breakdown(vals, weights)


def sgd_step(params: ParamSet, grads: Mapping[str, np.ndarray], lr: float) -> ParamSet:
    """Plain SGD on the entries present in ``grads``; other arrays are shared untouched."""
    return params.replace({n: params[n].astype(F64) - lr * np.asarray(g, F64) for n, g in grads.items()})


def mean_breakdown(items: list[LossBreakdown]) -> LossBreakdown:
    if not items:
        return LossBreakdown(0.0, 0.0, 0.0, 0.0, 0.0)
    cols = np.array([[b.cls, b.reg, b.obj, b.orn, b.total] for b in items], dtype=F64).mean(axis=0)
    return LossBreakdown(*(float(c) for c in cols))


def _batches(n: int, batch_size: int, rng: np.random.Generator, epochs: int, steps: int | None):
    order = np.concatenate([rng.permutation(n) for _ in range(epochs)])
    chunks = [order[i:i + batch_size] for i in range(0, len(order), batch_size)]
    if steps is not None:
        chunks = [chunks[i % len(chunks)] for i in range(steps)]
    return chunks


def supervised_epoch(st: TrainSettings, params: ParamSet, data: LabeledData, rng: np.random.Generator,
                     orthogonal: bool, steps: int | None = None, trainable: list[str] | None = None):
    if len(data.images) == 0:
        raise ValueError("server has no labeled data")
    trainable = params.names("all") if trainable is None else trainable
    losses = []
    for idx in _batches(len(data.images), st.batch_size, rng, st.local_epochs, steps):
        targets = supervised_targets([data.annotations[i] for i in idx], st.arch.grid, st.arch.num_classes)
        grads, br = loss_and_grads(st, params, data.images[idx], targets, trainable, orthogonal)
        params = sgd_step(params, grads, st.lr)
        losses.append(br)
    return params, mean_breakdown(losses)


def warmup(server: ServerState, rounds: int, st: TrainSettings, seed: int,
           on_round: Callable[[int, LossBreakdown], None] | None = None) -> ServerState:
    """Supervised server training for ``rounds`` epochs. No communication."""
    if rounds < 0:
        raise ValueError("rounds must be >= 0")
    if len(server.data.images) == 0:
        raise ValueError("server has no labeled data")
    params = server.params
    for t in range(server.round, server.round + rounds):
        params, br = supervised_epoch(st, params, server.data, np.random.default_rng([seed, 0x5E4, t]), False)
        if on_round is not None:
            on_round(t, br, params)
    return ServerState(params, server.data, server.round + rounds, WARMUP)


def sample_clients(num_clients: int, ratio: float, rng: np.random.Generator) -> list[int]:
    """Uniform sample without replacement of ``max(1, round(ratio * M))`` ids, ascending."""
    if not 0.0 < ratio <= 1.0:
        raise ValueError("sampling ratio must lie in (0, 1]")
    if num_clients < 1:
        raise ValueError("need at least one client")
    n = comm.sampled_count(num_clients, ratio)
    return sorted(int(i) for i in rng.choice(num_clients, size=n, replace=False))


def aggregate(updates: Mapping[int, tuple[ParamSet, float]], scope: str, base: ParamSet) -> ParamSet:
    """Weighted average over ``scope``; entries outside ``scope`` come from ``base``.

    ``updates`` maps client id -> (params, weight). Weights must be >= 0 and sum
    to 1. Summation is float64 in a canonical order keyed on the contributions
    themselves, so neither arrival order nor client numbering affects the result.
    """
    if not updates:
        raise ValueError("nothing to aggregate")
    weights = [w for _, w in updates.values()]
    if any(w < 0 for w in weights) or abs(sum(weights) - 1.0) > 1e-9:
        raise ValueError(f"aggregation weights must be non-negative and sum to 1, got {weights}")
    shapes = base.shapes()
    for cid, (ps, _) in updates.items():
        if ps.shapes() != shapes:
            raise ValueError(f"client {cid} parameters do not match the server's shapes")
    order = sorted(updates, key=lambda cid: _content_key(*updates[cid]))
    new = {}
    for name in base.names(scope):
        acc = np.zeros(shapes[name], dtype=F64)
        for cid in order:
            ps, w = updates[cid]
            acc += w * ps[name].astype(F64)
        new[name] = acc
    return base.replace(new)


def _content_key(params: ParamSet, weight: float) -> tuple[float, bytes]:
    # Summation order depends only on what is summed, so relabeling clients cannot change a bit.
    h = hashlib.sha256()
    for name in params.names("all"):
        h.update(np.ascontiguousarray(params[name]).tobytes())
    return float(weight), h.digest()


def _teacher_targets(st: TrainSettings, teacher: ParamSet, images: np.ndarray):
    preds = predict(teacher, images, st.arch)
    pl = labels_from_predictions(preds, st.tau1, st.tau2, st.nms_iou)
    return unsupervised_targets(pl, st.tau1, st.tau2)


def _client_update(client: ClientState, broadcast: ParamSet, st: TrainSettings, round_idx: int, seed: int,
                   trainable: list[str], orthogonal: bool, local_steps: int | None, observer: Observer | None):
    if len(client.data.images) == 0:
        raise ValueError(f"client {client.cid} has no unlabeled data")
    ema = reinit_ema(client.ema, broadcast, round_idx)
    if observer is not None:
        observer("ema_reinit", round=round_idx, client=client.cid, ema=ema, broadcast=broadcast)
    rng = np.random.default_rng([seed, 0xC11E, client.cid, round_idx])
    params = broadcast
    losses = []
    for idx in _batches(len(client.data.images), st.batch_size, rng, st.local_epochs, local_steps):
        images = client.data.images[idx]
        teacher = ema.params if st.labeler == "local_ema" else broadcast
        targets = _teacher_targets(st, teacher, images)
        if st.aug_noise > 0:
            images = np.clip(images + st.aug_noise * rng.standard_normal(images.shape), 0.0, 1.0)
        grads, br = loss_and_grads(st, params, images.astype(np.float32), targets, trainable, orthogonal)
        params = sgd_step(params, grads, st.lr)
        ema = ema_update(ema, params)
        losses.append(br)
    return ClientState(client.cid, client.data, params, ema, client.domains), mean_breakdown(losses)


def client_backbone_update(client: ClientState, broadcast: ParamSet, st: TrainSettings, round_idx: int = 0,
                           seed: int = 0, local_steps: int | None = None, train_scope: str = "backbone",
                           observer: Observer | None = None):
    """Unsupervised local training of the backbone only; neck and head stay the broadcast arrays.

    Returns the updated client state (whose ``params`` is the full model) and
    the mean loss breakdown.
    """
    trainable = broadcast.names(train_scope)
    return _client_update(client, broadcast, st, round_idx, seed, trainable, False, local_steps, observer)


def client_orthogonal_update(client: ClientState, broadcast: ParamSet, st: TrainSettings, round_idx: int = 0,
                             seed: int = 0, local_steps: int | None = None, observer: Observer | None = None):
    """Unsupervised loss plus the orthogonality penalty, over all parameters."""
    return _client_update(client, broadcast, st, round_idx, seed, broadcast.names("all"), True, local_steps,
                          observer)


def server_update(server: ServerState, aggregated: ParamSet, st: TrainSettings, orthogonal: bool,
                  round_idx: int, seed: int, local_steps: int | None = None):
    params, br = supervised_epoch(st, aggregated, server.data, np.random.default_rng([seed, 0x5E4, round_idx]),
                                  orthogonal, local_steps)
    return ServerState(params, server.data, round_idx + 1, server.phase), br


# --------------------------------------------------------------------------
# evaluation helpers
# --------------------------------------------------------------------------

def evaluate_model(params: ParamSet, data: LabeledData, arch: ArchConfig, conf: float, nms_iou: float):
    preds = predict(params, data.images, arch)
    dets = [decode(p, conf, nms_iou) for p in preds]
    res = evaluate_detections(dets, data.annotations, arch.num_classes)
    return res[0.5], res[0.75]


def domain_sensitivity(params: ParamSet, arch: ArchConfig, image: np.ndarray,
                       shifts: Mapping[Domain, object]) -> dict[str, float]:
    """Trace penalty of each domain's noise through a linearised (pixels -> neck cell) backbone and the head."""
    g = Graph()
    p = param_inputs(g, params, trainable=[])
    x = g.input("__x__", (1,) + image.shape)
    taps: dict = {}
    build_forward(g, arch, p, x, taps)
    neck = taps["neck"]
    s = arch.grid // 2
    rows = []
    inputs = dict(params.entries)
    inputs["__x__"] = image[None]
    for j in range(neck.shape[-1]):
        sel = np.zeros(neck.shape)
        sel[0, s, s, j] = 1.0
        root = g.sum(neck * g.const(sel))
        tr = run(g, inputs, root=root, wrt=["__x__"], dtype=np.float64)
        rows.append(tr.gradients["__x__"].reshape(-1))
    b = np.stack(rows)                                   # (k, d)
    w = params["head.conv.weight"].reshape(arch.out_channels, -1).T.astype(F64)  # (k, m)
    return {d.value: penalty_trace_lowrank(b, w, sh.diag, sh.factor) for d, sh in shifts.items()}


# --------------------------------------------------------------------------
# reporting
# --------------------------------------------------------------------------

METRIC_FIELDS = ("round", "phase", "entity", "loss_cls", "loss_reg", "loss_obj", "loss_orn", "map50", "map75",
                 "bytes_up", "bytes_down")


@dataclass
class EntityRecord:
    round: int
    phase: str
    entity: str
    loss: LossBreakdown
    map50: float
    map75: float
    bytes_up: int
    bytes_down: int

    def as_dict(self) -> dict:
        return {"round": self.round, "phase": self.phase, "entity": self.entity,
                "loss_cls": self.loss.cls, "loss_reg": self.loss.reg, "loss_obj": self.loss.obj,
                "loss_orn": self.loss.orn, "map50": self.map50, "map75": self.map75,
                "bytes_up": self.bytes_up, "bytes_down": self.bytes_down}


@dataclass
class RunReport:
    seed: int
    records: list[EntityRecord] = field(default_factory=list)
    timeline: list[tuple[int, str, str]] = field(default_factory=list)
    sampled: dict[int, list[int]] = field(default_factory=dict)
    final: dict[str, dict[str, float]] = field(default_factory=dict)
    warmup_only: dict[str, dict[str, float]] = field(default_factory=dict)
    comm: dict[str, object] = field(default_factory=dict)
    sensitivity: dict[str, float] = field(default_factory=dict)

    def metrics_lines(self) -> list[str]:
        return [json.dumps(r.as_dict()) for r in self.records]

    @staticmethod
    def mean_map(table: Mapping[str, Mapping[str, float]], key: str = "map50") -> float:
        return float(np.mean([v[key] for v in table.values()]))

    def summary(self) -> dict:
        return {"seed": self.seed, "final": self.final, "warmup_only": self.warmup_only,
                "final_mean_map50": self.mean_map(self.final) if self.final else None,
                "warmup_mean_map50": self.mean_map(self.warmup_only) if self.warmup_only else None,
                "comm": self.comm, "sensitivity": self.sensitivity}


@dataclass
class RunResult:
    report: RunReport
    server: ServerState
    clients: list[ClientState]
    warmup_params: ParamSet
    ledger: comm.CommLedger


# --------------------------------------------------------------------------
# orchestration
# --------------------------------------------------------------------------

@dataclass
class FederatedData:
    server: LabeledData
    clients: list[UnlabeledData]
    client_domains: list[tuple[Domain, ...]]
    tests: dict[Domain, LabeledData]
    shifts: dict


def build_data(cfg: Config, seed: int) -> FederatedData:
    arch, d = cfg.model, cfg.data
    shifts = {dom: default_shift(dom, arch.image_size, arch.channels) for dom in Domain}
    part = partition_clients(d.client_scenes, cfg.federation.num_clients, d.mode,
                             np.random.default_rng([seed, 0x9A47]), n_server=d.server_scenes)
    kw = dict(size=arch.image_size, channels=arch.channels, grid=arch.grid)
    server = labeled(materialize(part.server, seed, shifts, **kw))
    clients = [unlabeled(materialize(sched, seed, shifts, **kw), [i for i, _ in sched]) for sched in part.clients]
    noniid = d.mode.lower().replace("-", "").replace("_", "") == "noniid"
    owned = [(CLIENT_DOMAINS[k],) if noniid else tuple(Domain) for k in range(len(clients))]
    tests = {}
    for di, dom in enumerate(Domain):
        sched = [(TEST_ID_OFFSET + di * d.test_scenes + j, dom) for j in range(d.test_scenes)]
        tests[dom] = labeled(materialize(sched, seed, shifts, **kw))
    return FederatedData(server, clients, owned, tests, shifts)


def model_sizes(cfg: Config, params: ParamSet) -> dict[str, int]:
    """Bytes billed per upload scope; configured MB figures override the toy model's own size."""
    f = cfg.federation
    sizes = {"all": params.byte_size("all"), f.phase1_upload: params.byte_size(f.phase1_upload)}
    if f.model_size_mb > 0:
        sizes["all"] = comm.mb_to_bytes(f.model_size_mb)
    if f.phase1_size_mb > 0:
        sizes[f.phase1_upload] = comm.mb_to_bytes(f.phase1_size_mb)
    return sizes


def server_domains(cfg: Config) -> tuple[Domain, ...]:
    noniid = cfg.data.mode.lower().replace("-", "").replace("_", "") == "noniid"
    return (SERVER_DOMAIN,) if noniid else tuple(Domain)


def run_fedsto(cfg: Config, seed: int, observer: Observer | None = None, data: FederatedData | None = None,
               sensitivity: bool = True) -> RunResult:
    st = TrainSettings.from_config(cfg)
    f = cfg.federation
    arch = cfg.model
    conf, nms_iou = cfg.pseudo.conf_threshold, cfg.pseudo.nms_iou
    data = build_data(cfg, seed) if data is None else data
    report = RunReport(seed)
    ledger = comm.CommLedger()
    init = init_model(arch, seed)
    server = ServerState(init, data.server)
    clients = [ClientState(k, data.clients[k], init, EmaState(init, cfg.pseudo.ema_decay), data.client_domains[k])
               for k in range(len(data.clients))]
    srv_domains = server_domains(cfg)
    sizes = model_sizes(cfg, init)

    def eval_on(params, domains):
        scores = [evaluate_model(params, data.tests[dm], arch, conf, nms_iou) for dm in domains]
        return float(np.mean([s[0] for s in scores])), float(np.mean([s[1] for s in scores]))

    def log_warmup(t, br, params):
        m50, m75 = eval_on(params, srv_domains)
        report.records.append(EntityRecord(t, WARMUP, "server", br, m50, m75, 0, 0))
        report.timeline.append((t, "server_update", "server"))

    server = warmup(server, f.warmup_rounds, st, seed, log_warmup)
    warm_params = server.params
    report.warmup_only = {dm.value: dict(zip(("map50", "map75"), evaluate_model(
        warm_params, data.tests[dm], arch, conf, nms_iou))) for dm in Domain}
    if observer is not None:
        observer("warmup_done", round=server.round, params=warm_params)

    sampler = np.random.default_rng([seed, 0x5A3])
    phases = []
    if not f.skip_phase1:
        phases.append((PHASE1, f.phase1_rounds))
    phases.append((PHASE2, f.phase2_rounds))
    t = server.round
    for phase, n_rounds in phases:
        server.phase = phase
        for _ in range(n_rounds):
            sampled = sample_clients(len(clients), f.sample_ratio, sampler)
            report.sampled[t] = sampled
            broadcast = server.params
            updates, client_losses = {}, {}
            up_scope = f.phase1_upload if phase == PHASE1 else "all"
            for k in sampled:
                ledger.add(t, k, comm.DOWN, "all", sizes["all"], phase)
                report.timeline.append((t, "broadcast", f"client:{k}"))
                if observer is not None:
                    observer("broadcast", round=t, client=k, params=broadcast)
                if phase == PHASE1:
                    new_client, br = client_backbone_update(clients[k], broadcast, st, t, seed,
                                                            train_scope=f.phase1_train, observer=observer)
                else:
                    new_client, br = client_orthogonal_update(clients[k], broadcast, st, t, seed, observer=observer)
                clients[k] = new_client
                client_losses[k] = br
                ledger.add(t, k, comm.UP, up_scope, sizes[up_scope], phase)
                report.timeline.append((t, "client_update", f"client:{k}"))
                if observer is not None:
                    observer("client_update", round=t, client=k, phase=phase, broadcast=broadcast,
                             params=new_client.params)
            n_tot = sum(len(clients[k].data.images) for k in sampled)
            agg_in = {k: (clients[k].params, len(clients[k].data.images) / n_tot) for k in sampled}
            agg_scope = "backbone" if phase == PHASE1 else "all"
            if phase == PHASE1 and f.phase1_train == "backbone_neck":
                agg_scope = "backbone_neck"
            before = server.params
            aggregated = aggregate(agg_in, agg_scope, before)
            report.timeline.append((t, "aggregate", "server"))
            if observer is not None:
                observer("aggregate", round=t, phase=phase, before=before, after=aggregated, scope=agg_scope)
            server, sbr = server_update(server, aggregated, st, phase == PHASE2, t, seed)
            server.phase = phase
            report.timeline.append((t, "server_update", "server"))
            m50, m75 = eval_on(server.params, srv_domains)
            report.records.append(EntityRecord(t, phase, "server", sbr, m50, m75,
                                               ledger.total(comm.UP, round_idx=t), ledger.total(comm.DOWN, round_idx=t)))
            for k in sampled:
                c50, c75 = eval_on(clients[k].params, clients[k].domains)
                report.records.append(EntityRecord(t, phase, f"client:{k}", client_losses[k], c50, c75,
                                                   ledger.total(comm.UP, round_idx=t, client=k),
                                                   ledger.total(comm.DOWN, round_idx=t, client=k)))
            t += 1

    # personalised evaluation: each entity's final model on the domains it owns
    owners: dict[Domain, list[ParamSet]] = {dm: [] for dm in Domain}
    for dm in srv_domains:
        owners[dm].append(server.params)
    for c in clients:
        for dm in c.domains:
            owners[dm].append(c.params)
    final = {}
    for dm, models in owners.items():
        if not models:
            models = [server.params]
        scores = [evaluate_model(m, data.tests[dm], arch, conf, nms_iou) for m in models]
        final[dm.value] = {"map50": float(np.mean([s[0] for s in scores])),
                           "map75": float(np.mean([s[1] for s in scores]))}
    report.final = final
    table = comm.comm_report(ledger, sizes)
    report.comm = {"bytes_up": ledger.total(comm.UP), "bytes_down": ledger.total(comm.DOWN),
                   "baseline_bytes_up": ledger.count(comm.UP) * sizes["all"],
                   "reduction_pct": None if table.reduction is None else float(table.reduction)}
    if sensitivity:
        probe = data.tests[SERVER_DOMAIN].images.mean(axis=0)
        report.sensitivity = domain_sensitivity(server.params, arch, probe, data.shifts)
    return RunResult(report, server, clients, warm_params, ledger)

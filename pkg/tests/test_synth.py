import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedsto.model import parse_checkpoint
from fedsto.synth import (CLASS_SIZES, CLIENT_DOMAINS, SERVER_DOMAIN, Domain, DomainShift, default_shift,
                          generate_scene, labeled, materialize, partition_clients, scene_rng, threshold_boxes,
                          unlabeled)

SHIFTS = {d: default_shift(d) for d in Domain}


@given(st.integers(0, 2 ** 32 - 1), st.sampled_from(list(Domain)))
@settings(max_examples=40)
def test_annotations_match_oracle(seed, domain):
    sc = generate_scene(domain, SHIFTS[domain], np.random.default_rng(seed))
    assert 1 <= len(sc.annotations) <= 3
    found = sorted(threshold_boxes(sc.clean))
    assert found == sorted((c, pb) for (c, _), pb in zip(sc.annotations, sc.pixel_boxes))
    for (c, box), (x0, y0, x1, y1) in zip(sc.annotations, sc.pixel_boxes):
        lo, hi = CLASS_SIZES[c]
        assert lo <= x1 - x0 <= hi and lo <= y1 - y0 <= hi
        assert box.as_array() == pytest.approx(np.array([x0, y0, x1, y1]) / 32)
    cells = [(int(b.cxcywh()[1] * 4), int(b.cxcywh()[0] * 4)) for _, b in sc.annotations]
    assert len(set(cells)) == len(cells)
    assert sc.image.min() >= 0.0 and sc.image.max() <= 1.0


def test_scenes_are_seeded():
    a = generate_scene(Domain.RAINY, SHIFTS[Domain.RAINY], scene_rng(5, 17))
    b = generate_scene(Domain.RAINY, SHIFTS[Domain.RAINY], scene_rng(5, 17))
    assert a.image.tobytes() == b.image.tobytes() and a.annotations == b.annotations


def test_noise_covariance_matches_definition():
    rng = np.random.default_rng(0)
    for d in Domain:
        sh = SHIFTS[d]
        eps = sh.sample_noise(rng, 4000)
        cov = sh.covariance()
        idx = [0, 1, 100, 3071]
        emp = np.cov(eps[:, idx], rowvar=False)
        np.testing.assert_allclose(emp, cov[np.ix_(idx, idx)], atol=6 * cov[0, 0] / np.sqrt(4000) + 1e-5)


def test_rainy_noise_is_correlated():
    cov = SHIFTS[Domain.RAINY].covariance()
    # same column, different rows share the vertical streak factor
    assert abs(cov[0, 96]) > 1e-3
    assert SHIFTS[Domain.SNOWY].covariance()[0, 96] == 0.0


def test_domain_means_differ():
    rng = np.random.default_rng(1)
    means = {d: np.mean([generate_scene(d, SHIFTS[d], rng).image.mean() for _ in range(20)]) for d in Domain}
    assert means[Domain.SNOWY] > means[Domain.CLOUDY] > means[Domain.OVERCAST]


def test_shift_validation():
    with pytest.raises(ValueError):
        DomainShift(np.array([-1.0, 1.0]))
    with pytest.raises(ValueError):
        DomainShift(np.ones(4), np.ones((3, 1)))
    with pytest.raises(ValueError):
        generate_scene(Domain.CLOUDY, DomainShift.identity(10), np.random.default_rng(0))


def test_identity_shift_returns_clean():
    sc = generate_scene(Domain.CLOUDY, DomainShift.identity(3072), np.random.default_rng(2))
    np.testing.assert_array_equal(sc.image, sc.clean)


def test_noniid_partition():
    part = partition_clients(10, 3, "non-iid", np.random.default_rng(0), n_server=5)
    assert {d for _, d in part.server} == {SERVER_DOMAIN}
    for k, sched in enumerate(part.clients):
        assert {d for _, d in sched} == {CLIENT_DOMAINS[k]}
    ids = [i for i, _ in part.server] + [i for s in part.clients for i, _ in s]
    assert len(ids) == len(set(ids)) == 35
    with pytest.raises(ValueError):
        partition_clients(10, 4, "noniid", np.random.default_rng(0))


def test_iid_partition_mixes_domains():
    part = partition_clients(200, 2, "iid", np.random.default_rng(0))
    for sched in part.clients:
        assert {d for _, d in sched} == set(Domain)
    with pytest.raises(ValueError):
        partition_clients(10, 2, "sorted", np.random.default_rng(0))


def test_client_data_has_no_labels():
    scenes = materialize([(0, Domain.RAINY), (1, Domain.RAINY)], 0, SHIFTS)
    data = unlabeled(scenes, [0, 1])
    assert not hasattr(data, "annotations")
    assert data.images.shape == (2, 32, 32, 3)
    assert len(labeled(scenes).annotations) == 2


def test_export(tmp_path):
    sc = generate_scene(Domain.SNOWY, SHIFTS[Domain.SNOWY], np.random.default_rng(3))
    sc.export(tmp_path / "s")
    [(name, part, arr)] = parse_checkpoint((tmp_path / "s.bin").read_bytes())
    assert (name, part) == ("image", "snowy")
    np.testing.assert_array_equal(arr, sc.image)
    lines = (tmp_path / "s.txt").read_text().splitlines()
    assert len(lines) == len(sc.annotations) and all(len(x.split()) == 6 for x in lines)

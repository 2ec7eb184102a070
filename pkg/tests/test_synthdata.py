import os
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, HealthCheck, strategies as st

from gcmtal.graphbuild import tiou
from gcmtal.synthdata import (
    ConfigError, Dataset, ParseError, SynthConfig, VersionError, expected_jitter_tiou,
    generate, generate_streams, load, progress_directions, prototypes, save,
)

SMALL = SynthConfig(videos=6)


def _read(path):
    with open(path, "rb") as fh:
        return fh.read()


def test_generation_is_deterministic():
    assert generate(SMALL) == generate(SMALL)
    assert generate(SMALL) != generate(replace(SMALL, seed=1))


def test_saved_bytes_are_identical(tmp_path):
    save(generate(SMALL), tmp_path / "a")
    save(generate(SMALL), tmp_path / "b")
    for name in os.listdir(tmp_path / "a"):
        assert _read(tmp_path / "a" / name) == _read(tmp_path / "b" / name)


def test_round_trip_is_bit_exact(tmp_path):
    ds = generate(SMALL)
    save(ds, tmp_path)
    back = load(tmp_path)
    assert back == ds
    for v in ds.units:
        for u, w in zip(ds.units[v], back.units[v]):
            assert u.feature.tobytes() == w.feature.tobytes()
            assert u.extended_feature.tobytes() == w.extended_feature.tobytes()


def test_empty_dataset_round_trip(tmp_path):
    ds = generate(replace(SMALL, videos=0))
    assert ds.units == {}
    save(ds, tmp_path)
    back = load(tmp_path)
    assert back == ds and back.feature_dim == SMALL.feature_dim


@settings(max_examples=25, deadline=None, suppress_health_check=[HealthCheck.function_scoped_fixture])
@given(seed=st.integers(0, 10**6), videos=st.integers(0, 4), classes=st.integers(2, 6),
       split=st.sampled_from(["train", "test"]), stream=st.sampled_from(["rgb", "flow"]))
def test_round_trip_fuzz(tmp_path_factory, seed, videos, classes, split, stream):
    cfg = SynthConfig(seed=seed, videos=videos, classes=classes, split=split,
                      feature_dim=2 * classes + 4)
    ds = generate(cfg, stream)
    path = tmp_path_factory.mktemp("ds")
    save(ds, path)
    assert load(path) == ds


def test_truncated_file_reports_line(tmp_path):
    save(generate(SMALL), tmp_path)
    path = tmp_path / "units.txt"
    data = _read(path)
    n_lines = data.count(b"\n")
    with open(path, "wb") as fh:
        fh.write(data[:-5])
    with pytest.raises(ParseError) as err:
        load(tmp_path)
    assert err.value.line_no == n_lines


def test_bad_field_count_and_numbers(tmp_path):
    save(generate(SMALL), tmp_path)
    path = tmp_path / "units.txt"
    lines = _read(path).decode().splitlines(keepends=True)
    bad = lines[:3] + ["x\t1\t2\n"] + lines[4:]
    path.write_text("".join(bad))
    with pytest.raises(ParseError) as err:
        load(tmp_path)
    assert err.value.line_no == 4
    parts = lines[3].split("\t")
    parts[6] = "1.0,abc" + parts[6][3:]
    path.write_text("".join(lines[:3] + ["\t".join(parts)] + lines[4:]))
    with pytest.raises(ParseError):
        load(tmp_path)


def test_version_mismatch(tmp_path):
    save(generate(SMALL), tmp_path)
    path = tmp_path / "units.txt"
    path.write_text(path.read_text().replace("version=1", "version=9", 1))
    with pytest.raises(VersionError):
        load(tmp_path)


def test_missing_header(tmp_path):
    save(generate(SMALL), tmp_path)
    path = tmp_path / "groundtruth.txt"
    path.write_text("\n".join(path.read_text().splitlines()[1:]) + "\n")
    with pytest.raises(ParseError):
        load(tmp_path)


def test_noise_free_gt_units_carry_the_prototype():
    cfg = replace(SMALL, noise=0.0, confusion=0.0, jitter=0.0)
    ds = generate(cfg)
    protos = prototypes(cfg)
    seen = 0
    for v, units in ds.units.items():
        gts = ds.ground_truths[v]
        for u in units:
            if u.label is None:
                continue
            best = max(gts, key=lambda g: tiou(u.interval, g.interval))
            assert tiou(u.interval, best.interval) == 1.0
            assert np.array_equal(u.feature, protos[u.label])
            seen += 1
    assert seen > 0


def test_basis_is_orthonormal():
    cfg = SynthConfig()
    protos = prototypes(cfg)
    prog = progress_directions(cfg)[1:]
    assert np.allclose(protos @ protos.T, np.eye(cfg.classes + 1), atol=1e-12)
    assert np.allclose(prog @ prog.T, np.eye(cfg.classes), atol=1e-12)
    assert np.allclose(protos @ prog.T, 0.0, atol=1e-12)
    assert not np.any(progress_directions(cfg)[0])


def _cosines(ds):
    same, cross = [], []
    for units in ds.units.values():
        fg = [u for u in units if u.label]
        f = np.stack([u.feature for u in fg])
        f /= np.linalg.norm(f, axis=1, keepdims=True)
        cos = f @ f.T
        labels = np.array([u.label for u in fg])
        i, j = np.triu_indices(len(fg), 1)
        match = labels[i] == labels[j]
        same.extend(cos[i, j][match])
        cross.extend(cos[i, j][~match])
    return np.mean(same), np.mean(cross)


def test_same_class_units_are_more_similar():
    same, cross = _cosines(generate(SynthConfig(videos=100)))
    assert same - cross >= 0.2


def test_jitter_matches_expected_tiou():
    cfg = SynthConfig(videos=200, jitter=0.2)
    ds = generate(cfg)
    vals = []
    for v, units in ds.units.items():
        gts = ds.ground_truths[v]
        for u in units:
            if u.label is not None:
                vals.append(max(tiou(u.interval, g.interval) for g in gts))
    assert len(vals) >= 1000
    assert abs(np.mean(vals) - expected_jitter_tiou(0.2)) <= 0.05


def test_expected_jitter_tiou_monte_carlo():
    rng = np.random.default_rng(3)
    a, b = rng.uniform(-0.3, 0.3, (2, 200_000))
    inter = np.clip(np.minimum(1.0, 1.0 + b) - np.maximum(0.0, a), 0, None)
    mc = np.mean(inter / (1.0 + (1.0 + b - a) - inter))
    assert abs(mc - expected_jitter_tiou(0.3)) < 2e-3
    assert expected_jitter_tiou(0.0) == 1.0


def test_streams_share_intervals():
    s = generate_streams(SMALL)
    rgb, flow = s["rgb"], s["flow"]
    assert rgb.ground_truths == flow.ground_truths
    for v in rgb.units:
        for a, b in zip(rgb.units[v], flow.units[v]):
            assert a.interval == b.interval and a.label == b.label
            assert not np.array_equal(a.feature, b.feature)


def test_units_are_valid():
    ds = generate(SynthConfig(videos=30))
    for v, units in ds.units.items():
        assert units and ds.ground_truths[v]
        for u in units:
            assert 0 <= u.interval.start < u.interval.end
            assert np.all(np.isfinite(u.feature)) and u.feature.shape == (32,)


@pytest.mark.parametrize("kw", [
    dict(classes=1), dict(feature_dim=8), dict(noise=-1.0), dict(jitter=0.5),
    dict(prototype_angle=0.0), dict(instance_length_max=100.0), dict(duration_min=200.0),
    dict(split="dev"), dict(videos=-1), dict(jittered_per_gt=0),
])
def test_bad_configs(kw):
    with pytest.raises(ConfigError):
        generate(replace(SynthConfig(), **kw))


def test_dataset_equality_type():
    assert Dataset() == Dataset()
    assert Dataset().__eq__(3) is NotImplemented

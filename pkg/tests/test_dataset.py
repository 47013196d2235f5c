from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from copdflow import CLASSES, dataset, flowsim, pgm
from copdflow.dataset import Entry, Manifest
from copdflow.errors import ContractError, MissingArtifactError, ParseError, SimulationEnvironmentError
from copdflow.tensor import Rng

RATIOS = (Fraction(7, 10), Fraction(3, 20), Fraction(3, 20))


def exact_split_counts(n):
    quotas = [n * r for r in RATIOS]
    counts = [int(q) for q in quotas]
    order = sorted(range(3), key=lambda i: (-(quotas[i] - counts[i]), i))
    for i in order[:n - sum(counts)]:
        counts[i] += 1
    return counts


class StubGAN:
    """Stands in for a trained generator: constant images with a per-call offset."""

    def __init__(self, value):
        self.value = value

    def _check_trained(self):
        pass

    def sample(self, count, rng):
        return np.full((count, 128, 128), self.value) + 0.01 * rng.random((count, 128, 128))


def base_manifest(counts=dataset.BASE_COUNTS):
    entries = []
    for c in CLASSES:
        splits = dataset.assign_splits(counts[c], Rng(1).spawn(c))
        entries += [Entry(f"{c}{k:03d}", f"images/{c}{k:03d}.pgm", c, "real_proxy", splits[k], k)
                    for k in range(counts[c])]
    return Manifest(entries)


def test_split_counts_for_base_classes():
    assert dataset.split_counts(45) == [31, 7, 7]
    assert dataset.split_counts(113) == [79, 17, 17]
    assert dataset.split_counts(137) == [96, 21, 20]


@given(st.integers(0, 2000))
def test_split_counts_match_exact_arithmetic(n):
    counts = dataset.split_counts(n)
    assert counts == exact_split_counts(n)
    assert sum(counts) == n


def test_assign_splits_is_a_seeded_permutation():
    a = dataset.assign_splits(45, Rng(3))
    assert a == dataset.assign_splits(45, Rng(3))
    assert [a.count(s) for s in dataset.SPLITS] == [31, 7, 7]
    assert a != dataset.assign_splits(45, Rng(4))


def test_manifest_round_trip_is_byte_exact(tmp_path):
    m = base_manifest()
    m.save(tmp_path / "m.csv")
    raw = (tmp_path / "m.csv").read_bytes()
    assert raw.startswith(b"id,file,label,provenance,split,seed\nleft000,images/left000.pgm,left,real_proxy,")
    back = Manifest.load(tmp_path / "m.csv")
    assert back == m
    assert back.to_csv().encode() == raw
    assert back.counts() == dataset.BASE_COUNTS


@pytest.mark.parametrize("body,message", [
    ("a1,f,left,real_proxy,train\n", "line 2: expected 6 fields"),
    ("a1,f,left,real_proxy,train,1\na1,f,left,real_proxy,train,2\n", "line 3: duplicate id"),
    ("a1,f,up,real_proxy,train,1\n", "line 2: unknown label"),
    ("a1,f,left,real_proxy,train,1\na2,f,left,synthetic,test,2\n", "line 3: synthetic entry"),
    ("a1,f,left,real_proxy,train,x\n", "line 2: seed"),
    ("a-1,f,left,real_proxy,train,1\n", "line 2: id"),
])
def test_manifest_parse_errors(body, message):
    with pytest.raises(ParseError, match=message):
        Manifest.from_csv(dataset.MANIFEST_HEADER + "\n" + body, "m.csv")
    with pytest.raises(ParseError, match="line 1"):
        Manifest.from_csv("id,file\n" + body)


def test_manifest_invariants():
    e = Entry("a", "f", "left", "real_proxy", "train", 0)
    with pytest.raises(ContractError):
        Manifest([e, e])
    with pytest.raises(ContractError):
        Manifest([Entry("b", "f", "left", "synthetic", "val", 0)])
    with pytest.raises(MissingArtifactError):
        Manifest.load("/nonexistent/manifest.csv")


def test_rebalance_reaches_target(tmp_path):
    base = base_manifest()
    assert dataset.synthetic_needed(base) == {"left": 355, "right": 287, "both": 263}
    gans = {c: StubGAN(v) for c, v in zip(CLASSES, (-0.5, 0.0, 0.5))}
    out = dataset.rebalance(base, gans, tmp_path, seed=7)
    assert out.counts() == {c: 400 for c in CLASSES}
    assert out.counts(provenance="synthetic") == {"left": 355, "right": 287, "both": 263}
    assert all(e.split == "train" for e in out.select(provenance="synthetic"))
    assert out.counts(split="test") == base.counts(split="test")
    assert out.entries[:len(base)] == base.entries
    first = out.select(provenance="synthetic")[0]
    assert first.id == "leftsyn000"
    image = pgm.read_image(tmp_path / first.file, (128, 128))
    assert abs(image.mean() + 0.5) < 0.02
    # a balanced manifest comes back unchanged
    assert dataset.rebalance(out, {}, tmp_path, seed=7) == out


def test_rebalance_is_deterministic_and_needs_every_gan(tmp_path):
    base = base_manifest({"left": 3, "right": 2, "both": 4})
    gans = {c: StubGAN(0.0) for c in CLASSES}
    a = dataset.rebalance(base, gans, tmp_path / "a", seed=1, target=6)
    b = dataset.rebalance(base, gans, tmp_path / "b", seed=1, target=6)
    assert a.to_csv() == b.to_csv()
    for e in a.select(provenance="synthetic"):
        assert (tmp_path / "a" / e.file).read_bytes() == (tmp_path / "b" / e.file).read_bytes()
    with pytest.raises(ContractError, match="right"):
        dataset.rebalance(base, {"left": gans["left"], "both": gans["both"]}, tmp_path / "c", seed=1, target=6)


def test_generate_base_small_is_deterministic(tmp_path):
    counts = {"left": 2, "right": 1, "both": 1}
    a = dataset.generate_base(5, tmp_path / "a", counts=counts)
    b = dataset.generate_base(5, tmp_path / "b", counts=counts)
    assert a.counts() == counts
    for name in ("manifest.csv", "geometry.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    for e in a:
        assert (tmp_path / "a" / e.file).read_bytes() == (tmp_path / "b" / e.file).read_bytes()
    X, y = dataset.load_arrays(a, tmp_path / "a")
    assert X.shape == (4, 128, 128) and y.tolist() == [0, 0, 1, 2]
    assert X.max() == 1.0 and X.min() >= -1
    geometry = (tmp_path / "a" / "geometry.csv").read_text().splitlines()
    assert geometry[0] == dataset.GEOMETRY_HEADER and len(geometry) == 5
    dataset.verify_files(a, tmp_path / "a")
    (tmp_path / "a" / a.entries[0].file).unlink()
    with pytest.raises(MissingArtifactError):
        dataset.verify_files(a, tmp_path / "a")


def test_generate_base_reports_a_broken_solver(tmp_path):
    cfg = flowsim.SimConfig(max_iters=100)
    with pytest.raises(SimulationEnvironmentError, match="failed to converge"):
        dataset.generate_base(0, tmp_path, cfg=cfg, counts={"left": 2, "right": 0, "both": 0})

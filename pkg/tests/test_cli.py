import hashlib
from pathlib import Path

import pytest

from vicflow import cli
from vicflow.config import SpecError, build_spec, dump_spec, parse_spec

SMALL = """\
seed: 4
world:
  duration: 0.8
  n_objects: 10
data:
  n_train: 2
  n_test: 1
train:
  stage1_epochs: 1
  stage2_epochs: 1
eval:
  min_history: 6
"""


def tree_hash(root: Path) -> str:
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


@pytest.fixture(scope="module")
def spec_file(tmp_path_factory):
    p = tmp_path_factory.mktemp("spec") / "small.yaml"
    p.write_text(SMALL)
    return p


class TestSpec:
    def test_defaults_and_overrides(self):
        s = parse_spec(SMALL)
        assert s.world.n_objects == 10 and s.model.channels == 32 and s.seed == 4

    def test_round_trip_hash(self):
        s = parse_spec(SMALL)
        assert parse_spec(dump_spec(s)).hash == s.hash
        assert s.with_seed(5).hash != s.hash

    def test_unknown_key_has_line(self):
        with pytest.raises(SpecError) as e:
            parse_spec("seed: 1\ntrain:\n  stage1_epochs: 2\n  epochz: 3\n")
        assert e.value.line == 4 and e.value.key == "train.epochz"

    def test_seed_mandatory(self):
        with pytest.raises(SpecError):
            parse_spec("world: {}\n")

    def test_invalid_values(self):
        with pytest.raises(SpecError):
            build_spec({"seed": 1, "world": {"frame_interval": 0}})
        with pytest.raises(SpecError):
            build_spec({"seed": 1, "model": {"anchors": {"pos_iou": 0.3}}})


def test_gen_is_deterministic(tmp_path, spec_file):
    assert cli.main(["gen", "--spec", str(spec_file), "--out", str(tmp_path / "a")]) == 0
    assert cli.main(["gen", "--spec", str(spec_file), "--out", str(tmp_path / "b")]) == 0
    assert tree_hash(tmp_path / "a") == tree_hash(tmp_path / "b")
    assert len(list((tmp_path / "a" / "train").iterdir())) == 2
    index = (tmp_path / "a" / "train" / "scenario_000" / "index.json").read_text()
    assert parse_spec(SMALL).hash in index


@pytest.mark.slow
def test_train_then_sweep_nonfusion(tmp_path, spec_file):
    spec = str(spec_file)
    assert cli.main(["gen", "--spec", spec, "--out", str(tmp_path / "scen")]) == 0
    assert cli.main(["train", "--spec", spec, "--scenarios", str(tmp_path / "scen"), "--out", str(tmp_path / "ck")]) == 0
    ck = tmp_path / "ck" / cli.CHECKPOINT_NAME
    assert ck.exists() and (tmp_path / "ck" / "train_log.csv").read_text().startswith("# spec_hash=")
    rc = cli.main(["sweep", "--spec", spec, "--scenarios", str(tmp_path / "scen"), "--checkpoint", str(ck),
                   "--out", str(tmp_path / "res"), "--variants", "NonFusion,FFNet", "--latencies", "0,200"])
    assert rc == 0
    lines = (tmp_path / "res" / "results.csv").read_text().splitlines()
    assert lines[0].startswith("# spec_hash=")
    assert lines[1] == "variant,latency_ms,map_bev_50,map_bev_70,avg_byte,frames,seed"
    rows = [l.split(",") for l in lines[2:]]
    assert len(rows) == 4
    assert all(float(r[4]) == 0.0 for r in rows if r[0] == "NonFusion")
    assert all(float(r[4]) == 2592.0 for r in rows if r[0] == "FFNet")
    assert (tmp_path / "res" / "curve_FFNet.dat").exists()


def test_exit_codes(tmp_path, spec_file):
    assert cli.main([]) == cli.EXIT_USAGE
    assert cli.main(["sweep", "--out", str(tmp_path)]) == cli.EXIT_USAGE
    bad = tmp_path / "bad.yaml"
    bad.write_text("seed: 1\nworld:\n  nope: 1\n")
    assert cli.main(["gen", "--spec", str(bad), "--out", str(tmp_path / "x")]) == cli.EXIT_CONFIG
    assert cli.main(["sweep", "--spec", str(spec_file), "--scenarios", str(tmp_path), "--checkpoint",
                     str(tmp_path / "missing.cfwt"), "--out", str(tmp_path / "r")]) == cli.EXIT_RUNTIME
    assert cli.main(["sweep", "--spec", str(spec_file), "--scenarios", str(tmp_path), "--checkpoint",
                     str(tmp_path / "missing.cfwt"), "--out", str(tmp_path / "r"), "--variants", "Bogus"]) == cli.EXIT_USAGE


def test_verify_exit_zero(capsys):
    assert cli.main(["verify"]) == 0
    out = capsys.readouterr().out
    assert "FAIL" not in out and out.count("PASS") >= 9

"""Shared trained models for the slow and acceptance tests.

Training every variant takes minutes on one core, so the result is cached in
pytest's cache directory under a key made from the package sources and the
experiment settings. Editing any source file retrains.
"""

import hashlib
import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import pytest

from vicflow import tensor as T
from vicflow.config import DataSpec, ExperimentSpec
from vicflow.evaluator import EARLY, FFNET, FFNET_V, MIDDLE_NO_PRED, MIDDLE_NO_PRED_WIDE, SweepRunner, results_csv
from vicflow.pipeline import ModelBundle, prepare
from vicflow.scene import simulate
from vicflow.trainer import (FlowCache, TrainLog, make_pairs, mean_pair_loss, stage1_loss, stage2_pair_loss,
                             train_detector, train_stage1, train_stage2, train_vehicle_flow)

# 20 training scenarios, 24 paired test scenarios, desk-scale epochs
ACCEPT_SPEC = ExperimentSpec(seed=0, data=DataSpec(n_train=20, n_test=24))
N_STATIC = 4
STATIC_SEED0 = 2000
HELDOUT_FLOW_SCENARIOS = 6
BASELINE_EPOCHS = 4
SWEEP_VARIANTS = (FFNET, MIDDLE_NO_PRED, MIDDLE_NO_PRED_WIDE, FFNET_V, EARLY)
SWEEP_LATENCIES = (0, 100, 200, 300, 400, 500)

SRC = Path(__file__).resolve().parents[1] / "src" / "vicflow"


def cache_key(spec: ExperimentSpec) -> str:
    h = hashlib.sha256(spec.hash.encode())
    for p in sorted(SRC.glob("*.py")):
        h.update(p.name.encode())
        h.update(p.read_bytes())
    return h.hexdigest()[:20]


@dataclass
class Trained:
    spec: ExperimentSpec
    bundle: ModelBundle
    test: list
    static: list
    metrics: dict


def _scenarios(spec, seeds, cfg, **world):
    return [prepare(simulate(replace(spec.world_config(s), **world)), cfg) for s in seeds]


def _heldout_frames(test):
    return [(s, i) for s in range(len(test)) for i in range(0, len(test[s]), 5)]


def _stage1_heldout(net, test):
    with T.no_grad():
        return float(np.mean([stage1_loss(net, test[s], i).item() for s, i in _heldout_frames(test)]))


def _codec_cosines(net, test):
    out = []
    with T.no_grad():
        for s, i in _heldout_frames(test):
            feat = net.infra_feature(test[s].frames[i].infra_bins).tensor
            out.append(T.cosine_similarity(feat, net.codec.roundtrip_feature(feat)).item())
    return out


def train_all(spec: ExperimentSpec, train, test) -> tuple:
    """Train the bundle and record the before/after numbers the tests check."""
    cfg, tc = spec.model_config(), spec.train_config()
    bundle = ModelBundle(cfg)
    tlog = TrainLog()
    net = bundle.ffnet
    m = {"stage1_heldout_init": _stage1_heldout(net, test)}
    train_stage1(net, train, tc, tlog, "stage1")
    m["stage1_heldout_final"] = _stage1_heldout(net, test)
    m["codec_cosines"] = _codec_cosines(net, test)

    cache = FlowCache(net, train)
    pairs = make_pairs(train, tc)
    held = test[:HELDOUT_FLOW_SCENARIOS]
    hcache, hpairs = FlowCache(net, held), make_pairs(held, tc)
    dt = cfg.frame_interval
    m["stage2_heldout_init"] = mean_pair_loss(lambda p: stage2_pair_loss(net, hcache, p, dt), hpairs)
    train_stage2(net, train, tc, tlog, pairs, cache)
    m["stage2_heldout_final"] = mean_pair_loss(lambda p: stage2_pair_loss(net, hcache, p, dt), hpairs)

    train_vehicle_flow(bundle.vflow, net, train, tc, tlog, pairs, cache)
    train_stage1(bundle.wide, train, tc, tlog, "stage1_wide")
    train_detector(bundle.nonfusion, train, tc, "vehicle", tlog, epochs=BASELINE_EPOCHS)
    train_detector(bundle.early, train, tc, "early", tlog, epochs=BASELINE_EPOCHS)
    return bundle, m, tlog


@pytest.fixture(scope="session")
def trained(request) -> Trained:
    spec = ACCEPT_SPEC
    cfg = spec.model_config()
    test = _scenarios(spec, spec.test_seeds(), cfg)
    static = _scenarios(spec, range(STATIC_SEED0, STATIC_SEED0 + N_STATIC), cfg, object_speed_range=(0.0, 0.0))
    root = Path(request.config.cache.mkdir("vicflow_trained"))
    key = cache_key(spec)
    wpath, mpath = root / f"{key}.cfwt", root / f"{key}.json"
    bundle = ModelBundle(cfg)
    if wpath.exists() and mpath.exists():
        bundle.load_bytes(wpath.read_bytes())
        metrics = json.loads(mpath.read_text())
    else:
        train = _scenarios(spec, spec.train_seeds(), cfg)
        bundle, metrics, tlog = train_all(spec, train, test)
        wpath.write_bytes(bundle.to_bytes())
        mpath.write_text(json.dumps(metrics))
        (root / f"{key}_train_log.csv").write_text(tlog.to_csv())
    return Trained(spec, bundle, test, static, metrics)


@pytest.fixture(scope="session")
def sweep(trained) -> dict:
    """(variant, latency_ms) -> SweepRow over the paired test scenarios."""
    runner = SweepRunner(trained.bundle, trained.test, trained.spec.eval)
    rows = runner.run(SWEEP_VARIANTS, SWEEP_LATENCIES, seed=trained.spec.channel.seed)
    _SWEEP_CSV.append(results_csv(rows))
    return {(r.variant, r.latency_ms): r for r in rows}


# one summary line per acceptance criterion -------------------------------------------------

_CRITERIA: dict = {}
_SWEEP_CSV: list = []


def pytest_runtest_logreport(report):
    name = report.nodeid.rsplit("::", 1)[-1]
    if not name.startswith("test_criterion_"):
        return
    if report.when == "call" or (report.when == "setup" and report.failed):
        n = int(name.split("_")[2])
        detail = dict(report.user_properties).get("detail", "")
        if report.when == "setup":
            detail = "fixture failed"
        _CRITERIA[n] = ("PASS" if report.passed else "FAIL", detail)


def pytest_terminal_summary(terminalreporter):
    if _SWEEP_CSV:
        terminalreporter.section("latency sweep (mAP@BEV)")
        for line in _SWEEP_CSV[0].splitlines():
            terminalreporter.write_line(line)
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for n in sorted(_CRITERIA):
            verdict, detail = _CRITERIA[n]
            terminalreporter.write_line(f"criterion {n:2d}: {verdict}  {detail}")

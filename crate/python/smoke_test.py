"""Smoke test for the fedsplit Python extension.

Build first, then run from the repository root:

    cargo build --release -p fedsplit-py
    python3 python/smoke_test.py

An installed ``fedsplit`` module (e.g. via maturin) is used if present,
otherwise the freshly built shared library under target/release.
"""

import importlib.machinery
import importlib.util
import json
import pathlib
import sys
import tempfile

ROOT = pathlib.Path(__file__).resolve().parents[1]


def load():
    try:
        import fedsplit

        return fedsplit
    except ImportError:
        pass
    for name in ("libfedsplit.so", "libfedsplit.dylib", "fedsplit.dll"):
        lib = ROOT / "target" / "release" / name
        if lib.exists():
            loader = importlib.machinery.ExtensionFileLoader("fedsplit", str(lib))
            spec = importlib.util.spec_from_loader("fedsplit", loader)
            module = importlib.util.module_from_spec(spec)
            loader.exec_module(module)
            return module
    sys.exit("fedsplit extension not found; run `cargo build --release -p fedsplit-py`")


LAYERS = [
    {"kind": "dense", "units": 16},
    {"kind": "batch_norm"},
    {"kind": "relu"},
    {"kind": "dense", "units": 2},
]


def main():
    fs = load()
    assert "splitavg" in fs.STRATEGIES and len(fs.STRATEGIES) == 10

    assert fs.ks_statistic([0.0, 1.0, 1.0], [1.0, 0.0, 1.0]) == 0.0
    assert fs.ks_statistic([0.0, 0.0], [1.0, 2.0]) == 1.0

    data = fs.Dataset.blobs(1200, classes=2, dims=8, seed=1)
    train, test = data.split(0.2, seed=1)
    assert len(train) + len(test) == 1200

    iid = fs.Partition.iid(train, 4, seed=2)
    assert iid.mean_ks(train) < 0.1
    skew = fs.Partition.calibrated(train, 4, 0.67, seed=2)
    assert abs(skew.mean_ks(train) - 0.67) <= 0.05, skew.mean_ks(train)

    def run(strategy, **kw):
        sim = fs.Simulation(strategy, LAYERS, train, skew, seed=3, lr=0.01, **kw)
        curve = sim.train(3)
        sim.finish()
        return sim, curve

    v1, curve = run("splitavg", cut=1)
    assert len(curve) == 3 and all(c == c for c in curve)
    v2, _ = run("splitavg_v2", cut=1)
    assert v1.weights() == v2.weights(), "v1 and v2 diverged"
    metrics = v1.evaluate(test)
    assert 0.5 <= metrics["accuracy"] <= 1.0, metrics
    assert metrics["uplink"] == v1.ledger_total("uplink")

    central, _ = run("centralized")
    assert central.ledger_total("uplink") == 0

    per_sample, per_inst, per_iter = fs.analytic_uplink(
        "fedsgd", [8], LAYERS, 2, 32, 4
    )
    assert per_sample == 0 and per_iter == 4 * per_inst

    with tempfile.TemporaryDirectory() as tmp:
        cfg = pathlib.Path(tmp) / "exp.toml"
        cfg.write_text(
            "seeds = [0]\nepochs = 2\n"
            '[dataset]\nkind = "blobs"\nn = 400\n'
            '[model]\nlayers = [{ kind = "dense", units = 8 }, { kind = "relu" }, { kind = "dense", units = 2 }]\n'
            '[strategy]\nkind = "fedavg"\nlr = 0.01\n'
            "[partition]\ninstitutions = 2\n"
        )
        records = json.loads(fs.run_config(str(cfg), out=str(pathlib.Path(tmp) / "out")))
        assert records[0]["strategy"] == "fedavg"
        assert (pathlib.Path(tmp) / "out" / "results.csv").exists()
        assert fs.config_hash(cfg.read_text()) == records[0]["config_hash"]
        try:
            fs.config_hash(cfg.read_text().replace('"fedavg"', '"fedprox"'))
        except ValueError as e:
            assert "fedprox" in str(e)
        else:
            raise AssertionError("bad strategy accepted")

    passed, table = fs.verify()
    assert passed, table
    print("smoke test passed")


if __name__ == "__main__":
    main()

"""Smoke test for the e3lab_py extension module."""

import math
import tempfile
from pathlib import Path

import e3lab_py as e3

TINY = """
master_seed = 3
budget = 20
buffer_capacity = 12
sequence = ["g_pattern", "g_shaping"]
sweep_budgets = [10, 20]
methods = ["e3", "finetune"]

[corpus]
image_size = 24
patch_size = 16
real = { train = 40, val = 0, test = 20 }
baseline = { train = 30, val = 0, test = 21 }
emerging = { train = 20, val = 0, test = 10 }

[detector]
preset = "tiny"

[baseline_train]
epochs = 1
patch_size = 16

[expert_train]
epochs = 1
patch_size = 16

[cl.train]
epochs = 1
patch_size = 16

[ekfn_train]
steps = 5
"""


def check_metrics():
    assert abs(e3.rer(0.99, 0.97) - 66.667) < 0.01
    assert e3.roc_auc([0.9, 0.8], [0.1, 0.8]) == 0.875
    assert e3.accuracy([0.9, 0.2], [True, False]) == 1.0
    assert [e3.quota(1000, k) for k in (1, 19)] == [250, 25]
    assert e3.effective_capacity(200, 20) == 80


def check_tape():
    tape = e3.Tape()
    w = e3.Tensor([2, 2], [1.0, -2.0, 0.5, 3.0], requires_grad=True)
    x = tape.constant([1, 2], [0.5, -1.0])
    wv = tape.leaf(w)
    loss = tape.sum(tape.relu(tape.matmul(x, wv)))
    assert tape.value(loss) == [0.0]
    loss2 = tape.sum(tape.matmul(x, wv))
    grads = tape.backward(loss2)
    assert grads.get(wv) == [0.5, 0.5, -1.0, -1.0]
    z = tape.constant([2], [0.3, -0.7])
    bce = tape.backward(tape.bce_with_logits(z, [1.0, 0.0]))
    assert bce.get(z) is None
    try:
        tape.matmul(wv, x)
    except ValueError:
        pass
    else:
        raise AssertionError("shape mismatch accepted")


def check_pipeline(tmp: Path):
    cfg = e3.RunConfig.from_toml(TINY)
    assert cfg.generator_sequence() == ["g_pattern", "g_shaping"]
    assert e3.RunConfig.from_toml(cfg.to_toml()).fingerprint() == cfg.fingerprint()
    try:
        e3.RunConfig.from_toml("budget = 5")
    except ValueError:
        pass
    else:
        raise AssertionError("config without master_seed accepted")

    corpus = e3.Corpus.build(cfg)
    corpus.save(tmp / "corpus")
    assert e3.Corpus.load(tmp / "corpus").pixel_checksum() == corpus.pixel_checksum()
    test = corpus.images("g_pattern", "test")
    assert len(test) == 10 and all(i.synthetic for i in test)

    f0 = e3.Detector.train_baseline(cfg, corpus)
    f0.save(tmp / "f0")
    assert e3.Detector.load(tmp / "f0").checksum() == f0.checksum()
    scores = f0.scores(test + corpus.images("real", "test"), patch=16)
    assert all(0.0 < s < 1.0 for s in scores)

    results = e3.run(cfg, tmp / "run", checkpoints=False)
    (r,) = results
    assert r.protocol == "sequential" and r.master_seed == 3
    final = [e for e in r.episodes if e.method == "e3"][-1]
    assert final.generator == "g_shaping"
    assert {"g_pattern", "g_shaping"} <= set(final.auc)
    assert math.isfinite(final.average_auc)
    assert (tmp / "run" / "results.csv").exists()
    again = e3.run(cfg, tmp / "again", checkpoints=False)
    assert (tmp / "run" / "results.csv").read_bytes() == (tmp / "again" / "results.csv").read_bytes()
    assert again[0].episodes[-1].average_auc == r.episodes[-1].average_auc


def main():
    check_metrics()
    check_tape()
    with tempfile.TemporaryDirectory() as d:
        check_pipeline(Path(d))
    print("e3lab_py", e3.__version__, "smoke test passed")


if __name__ == "__main__":
    main()

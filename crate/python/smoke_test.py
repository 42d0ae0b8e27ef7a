"""Smoke test for the tokidle Python extension.

Build and install first:

    pip install maturin
    maturin develop --release -m crates/py/Cargo.toml
"""

import json
import math
import sys
import tempfile
from pathlib import Path

import tokidle


def close(a, b, tol=1e-12):
    return abs(a - b) <= tol


def main():
    toy = tokidle.ViTConfig.toy()
    assert toy.num_tokens == 17 and toy.num_patches == 16
    assert tokidle.ViTConfig.from_json(toy.to_json()).to_json() == toy.to_json()

    ratios = tokidle.keep_schedule(0.5, 8)
    assert ratios == [1.0, 1.0, 0.5, 0.5, 0.25, 0.25, 0.125, 0.125], ratios

    selected, idle = tokidle.select([0.4, 0.1, 0.3, 0.2], 0.5)
    assert selected == [0, 1, 3] and idle == [2, 4], (selected, idle)

    uniform = [[0.25] * 4 for _ in range(4)]
    cut = tokidle.cut_losses(uniform, [0, 1, 2])
    assert close(cut["inter"], 0.3125) and close(cut["intra"], 0.0625), cut
    assert close(cut["assoc_selected"], 3.0) and close(cut["assoc_idle"], 1.0), cut

    assert close(tokidle.smoothness([[1.0, 0.0], [2.0, 0.0]]), 1.0)

    table = tokidle.macs_table(tokidle.ViTConfig.deit_small())
    assert len(table) == 8 and close(table[0]["gmacs"], 4.6, 0.05), table[0]
    single = tokidle.count_macs(toy, 0.7)
    assert single["total"] > 0

    images, labels = tokidle.synthetic_dataset(toy, 0, 8)
    h, w, c = toy.image_shape
    assert len(images) == 8 and len(images[0]) == h * w * c
    assert sorted(set(labels)) == [0, 1, 2, 3]

    model = tokidle.Model.init(toy, 0)
    out = model.forward(images[0], keep_ratio=0.5)
    assert len(out["logits"]) == toy.num_classes
    assert [len(s) for s in out["selected"]] == [17, 17, 9, 9, 5, 5, 3, 3], out["selected"]
    assert out["cross_set_mass"] is None
    ft = model.forward(images[0], keep_ratio=0.5, mode="finetune")
    assert all(m >= 0.0 for m in ft["cross_set_mass"])
    full = model.forward(images[0])
    same = model.forward(images[0], keep_ratio=1.0)
    assert full["logits"] == same["logits"]

    try:
        model.forward(images[0], keep_ratio=0.0)
    except tokidle.ContractError:
        pass
    else:
        raise AssertionError("keep ratio 0 accepted")
    try:
        model.forward(images[0], mode="sideways")
    except tokidle.ContractError:
        pass
    else:
        raise AssertionError("unknown mode accepted")

    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        model.save(tmp / "ckpt")
        again = tokidle.Model.load(tmp / "ckpt")
        assert again.forward(images[0], keep_ratio=0.5)["logits"] == out["logits"]

        tokidle.write_dataset(toy, 3, 8, tmp / "data")
        report = model.evaluate(tmp / "data", 0.7, mode="finetune")
        assert report["samples"] == 8 and 0.0 <= report["accuracy"] <= 1.0
        diag = model.diagnose(tmp / "data", 0.7)
        assert diag["samples"] == 8 and "P_A" in diag["reselection"]

        cfg = {
            "vit": json.loads(toy.to_json()),
            "keep_ratio": 0.7,
            "learning_rate": 1e-3,
            "epochs": 2,
            "batch_size": 4,
            "seed": 0,
            "train_samples": 8,
            "weights": {"alpha": 0.0, "beta": 0.0, "theta": 20.0},
        }
        (tmp / "cfg.json").write_text(json.dumps(cfg))
        metrics = tokidle.train(tmp / "cfg.json", tmp / "run")
        assert len(metrics) == 2 and all(math.isfinite(m["loss"]) for m in metrics)
        assert (tmp / "run" / "checkpoint" / "manifest.json").exists()

        cfg["vit"]["num_layers"] = 2
        cfg["num_stages"] = 2
        cfg["keep_ratio"] = 0.5
        (tmp / "gc.json").write_text(json.dumps(cfg))
        gc = tokidle.grad_check(tmp / "gc.json", 0)
        assert gc["max_rel_error"] < 1e-4, gc

    print("python smoke test passed")
    return 0


if __name__ == "__main__":
    sys.exit(main())

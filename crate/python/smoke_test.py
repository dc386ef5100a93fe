"""Builds the extension module, imports it and exercises the main entry points."""

import math
import pathlib
import shutil
import subprocess
import sys
import tempfile

ROOT = pathlib.Path(__file__).resolve().parent.parent


def build_module(dest):
    subprocess.run(
        ["cargo", "build", "--release", "-p", "iamnn-python"], cwd=ROOT, check=True
    )
    shutil.copy(ROOT / "target" / "release" / "libiamnn.so", dest / "iamnn.so")
    sys.path.insert(0, str(dest))
    import iamnn

    return iamnn


def main():
    with tempfile.TemporaryDirectory() as tmp:
        tmp = pathlib.Path(tmp)
        iamnn = build_module(tmp)

        t = iamnn.halting_rule([0.6, 0.5, 0.9], 3, 0.01)
        assert t["n_iters"] == 2, t
        assert math.isclose(sum(t["weights"]), 1.0), t
        assert math.isclose(t["ponder"], 2.4), t

        imagenet = iamnn.Config.preset("imagenet")
        params = iamnn.count_params(imagenet)["total"]
        assert 4_000_000 <= params <= 6_000_000, params
        lo = iamnn.count_flops(imagenet, "min", "multiply_add")["total"]
        hi = iamnn.count_flops(imagenet, "max", "multiply_add")["total"]
        assert lo < hi
        per_block = iamnn.count_flops(imagenet, [1, 1, 1, 1], "multiply_add")["total"]
        assert per_block == lo

        cfg = iamnn.Config().with_overrides(
            "input.size = 12\nnum_classes = 3\ndata.samples_per_class = 8\n"
            "data.val_samples_per_class = 4\ntrain.batch_size = 8\n"
        )
        assert iamnn.Config(cfg.to_text()).to_text() == cfg.to_text()
        train, val = iamnn.Dataset.synthetic(cfg)
        assert len(train) == 24 and len(val) == 12

        trainer = iamnn.Trainer(cfg)
        for _ in range(3):
            stats = trainer.step(train)
        assert stats["step"] == 3 and math.isfinite(stats["loss"])
        report = trainer.evaluate(val, top_k=2)
        assert len(report["predictions"]) == 12
        assert report["topk"] >= report["top1"]

        ckpt = tmp / "run.ckpt"
        trainer.save(str(ckpt))
        restored = iamnn.Trainer.load(str(ckpt))
        assert restored.steps_done == 3

        shape, values = val.images()
        a = trainer.network().predict(values, shape[0])
        b = restored.network().predict(values, shape[0])
        assert a == b
        logits, iterations = a
        assert len(logits) == 12 and len(logits[0]) == 3
        assert all(1 <= n <= m for row in iterations for n, m in zip(row, cfg.max_iterations))

        try:
            iamnn.Config("no_such_key = 1")
        except ValueError as e:
            assert "no_such_key" in str(e)
        else:
            raise AssertionError("unknown key accepted")

    print("python smoke test passed")


if __name__ == "__main__":
    main()

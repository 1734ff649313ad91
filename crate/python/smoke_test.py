"""Quick end-to-end check of the pyfasdg extension module.

Build first, e.g. `maturin develop -m crates/python/Cargo.toml`.
"""

import math
import os
import tempfile

import pyfasdg as f


def close(a, b, tol=1e-9):
    return abs(a - b) <= tol


def main():
    v = f.l2_normalize([3.0, 4.0])
    assert close(v[0], 0.6) and close(v[1], 0.8)

    y = f.layer_norm([[1.0, 2.0, 3.0, 4.0]], [1.0] * 4, [0.0] * 4)
    assert close(sum(y[0]), 0.0, 1e-9)

    # identical keys give uniform attention, so the output is the mean of V
    out = f.scaled_dot_attention([[1.0, 0.0]], [[0.0, 0.0]] * 2, [[1.0, 2.0], [3.0, 4.0]], 1)
    assert close(out[0][0], 2.0) and close(out[0][1], 3.0)

    vf = f.haf_feature([[0.1 * (i + j) for j in range(8)] for i in range(3)], out_dim=4, heads=2)
    assert len(vf) == 4 and all(math.isfinite(x) for x in vf)

    tri = f.triplet_loss([1.0, 0.0], [1.0, 0.0], [0.0, 1.0])
    assert close(tri, 0.0)
    assert close(f.total_loss(0.5, 0.25, 2.0), 1.0)

    assert close(f.compute_auc([0.9, 0.8, 0.1, 0.2], [1, 1, 0, 0]), 1.0)
    h, _tau = f.compute_hter([0.9, 0.8, 0.1, 0.2], [1, 1, 0, 0])
    assert close(h, 0.0)
    far, frr = f.compute_far_frr([0.9, 0.8, 0.1, 0.2], [1, 1, 0, 0], 0.85)
    assert close(far, 0.0) and close(frr, 0.5)

    assert len(f.prompt_digest("a photo of a real face")) == 64

    lib = f.PromptLibrary.shipped()
    assert len(lib.prompts("real")) > 0
    m, n = lib.sample_pair("print", 0)
    assert m in lib.prompts("print") and n not in lib.prompts("print")

    enc = f.TextEncoder("hash", 16)
    e = enc.encode("a photo of a real face")
    assert len(e) == 16 and e == enc.encode("a photo of a real face")

    data = []
    for i, name in enumerate(["A", "B"]):
        data += f.generate_domain(name, i, 6, 3, 3, size=16)
    assert {s.kind for s in data} == {"real", "print", "replay"}
    assert data[0].shape == [3, 16, 16]

    cfg = f.TrainConfig.micro()
    cfg.set("train.epochs", "2")
    ckpt, log = f.train(cfg, data, lib, f.TextEncoder("hash", 4))
    assert len(log) == 2 and all(math.isfinite(row[1]) for row in log)

    scores = ckpt.evaluate(data)
    assert len(scores) == len(data) and all(0.0 <= s <= 1.0 for s in scores)

    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "model.ckpt")
        ckpt.save(path)
        again = f.Checkpoint.load(path)
        assert again.evaluate(data) == scores
        assert f.Checkpoint.from_bytes(ckpt.to_bytes()).epoch == ckpt.epoch

    try:
        f.Checkpoint.from_bytes(b"junk")
    except ValueError:
        pass
    else:
        raise AssertionError("corrupt checkpoint accepted")

    assert f.cli(["--help"]) == 0
    assert f.cli(["train", "--no-such-flag"]) == 2

    print("smoke test ok")


if __name__ == "__main__":
    main()

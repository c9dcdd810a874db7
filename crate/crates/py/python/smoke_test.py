"""Smoke test for the qv2x extension module.

Build and install with `maturin develop -m crates/py/Cargo.toml` (or copy the
built shared library next to this script as `qv2x.so`), then run
`python crates/py/python/smoke_test.py`.
"""

import math
import os
import sys
import tempfile

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

import qv2x


def check(cond, what):
    if not cond:
        raise SystemExit(f"FAIL: {what}")
    print(f"ok: {what}")


def main():
    # Scenes
    sc = qv2x.gen_scenario(11, n_agents=2, n_objects=4, n_frames=2)
    again = qv2x.Scenario.from_json(sc.to_json())
    check(again.to_json() == sc.to_json(), "scenario JSON round trip")
    check(sc.agent_ids() == [0, 1], "agent ids")
    labels = sc.label_grid(0)
    h, w, c = labels.shape
    check(qv2x.FeatureGrid.from_bytes(labels.to_bytes()).data() == labels.data(), "grid binary round trip")

    # Quantizer
    xs = [i * 0.37 - 3.0 for i in range(50)]
    qp = qv2x.init_maxmin(xs, 4)
    err = max(abs(a - b) for a, b in zip(xs, qp.fake_quant(xs)))
    check(err <= qp.scale[0] / 2 + 1e-9, "fake-quant error within half a step")
    check(qv2x.init_maxmin(xs, 32).fake_quant(xs) == xs, "32-bit quantizer is identity")
    searched = qp.search(xs, 0.5, 1.2, 20)
    check(searched.bits == 4, "scale search keeps bit width")

    # Codebook and wire format
    dim, n_l = 4, 8
    codes = [math.sin(1.7 * i + 0.3) for i in range(n_l * dim)]
    cb = qv2x.Codebook(n_l, dim, codes, [1.0, 0.5])
    grid = qv2x.FeatureGrid(3, 2, dim, [math.cos(0.9 * i) for i in range(3 * 2 * dim)])
    idx = cb.assign(grid, 2)
    check(len(idx) == 3 * 2 * 2 and all(0 <= i < n_l for i in idx), "assignment indices in range")
    check(cb.reconstruct(idx, 3, 2, 2).shape == (3, 2, dim), "reconstruction shape")
    msg = cb.encode_message(1, 1234, [1.0, 2.0, 0.5], idx, 3, 2, 2)
    sender, ts, pose, got, hh, ww, nr = cb.decode_message(msg)
    check((sender, ts, got, hh, ww, nr) == (1, 1234, idx, 3, 2, 2), "wire round trip")
    try:
        cb.decode_message(msg[:-1])
        check(False, "truncated message rejected")
    except ValueError:
        check(True, "truncated message rejected")

    # Sizes and latency
    check(qv2x.raw_feature_bytes(200, 704, 64) == 200 * 704 * 64 * 4, "raw feature size")
    lat = qv2x.comm_latency(1000, seed=3, n=5)
    check(lat == qv2x.comm_latency(1000, seed=3, n=5) and all(l >= 0 for l in lat), "seeded latency draws")

    # Model training, calibration and evaluation on a tiny setup
    scenes = [qv2x.gen_scenario(100 + i, n_agents=2, n_objects=4, n_frames=2) for i in range(4)]
    model = qv2x.train_fp(scenes, '{"epochs": 1, "model": {"channels": 8, "hidden": 4}}')
    ap = model.ap(scenes[:1], seed=1)
    check(0.0 <= ap <= 1.0, f"fp AP in [0, 1] ({ap:.3f})")
    q = qv2x.calibrate(model, scenes, '{"fraction": 0.5, "w_bits": 8, "a_bits": 8, "steps": 20, "scale_grid": 5}')
    check(q.size_bytes < model.size_bytes(32), "quantized model is smaller")
    with tempfile.TemporaryDirectory() as d:
        p = os.path.join(d, "q.bin")
        q.save(p)
        check(qv2x.QuantizedModel.load(p).ap(scenes[:1], seed=1) == q.ap(scenes[:1], seed=1), "quantized model save/load")
    print("all checks passed")


if __name__ == "__main__":
    main()

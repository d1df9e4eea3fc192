"""Smoke test for the `acpc` extension module.

Build and run from the repository root:

    cargo build --release -p acpc-py --features extension-module
    cp target/release/libacpc_py.so python/acpc.so
    python3 python/smoke_test.py
"""

import math
import os
import sys
import tempfile

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

import acpc  # noqa: E402


def check_alignment():
    rows = [[-0.1, -1.0, -2.0], [-3.0, -0.5, -0.2]]
    value, occ = acpc.expected_path_score(rows)
    paths = acpc.enumerate_paths(2, 3)
    brute = math.log(sum(math.exp(sum(rows[k][m] for m, k in enumerate(p))) for p in paths))
    assert abs(value - brute) < 1e-12, (value, brute)
    for m in range(3):
        assert abs(occ[0][m] + occ[1][m] - 1.0) < 1e-12
    path, best = acpc.best_path(rows)
    assert path == [0, 1, 1] and abs(best - (-0.8)) < 1e-12, (path, best)
    score, normalizers, blank_mass = acpc.ctc_blank_trick_score(rows)
    assert abs(score + sum(normalizers) - value) < 1e-6
    assert blank_mass < 1e-20
    assert acpc.count_score_evaluations(4, 12, 128) == 560


def check_training(tmp):
    data = acpc.Dataset.generate("channels = 2\nsequences_per_channel = 8\nlength = 512\n")
    assert len(data) == 16
    assert data.channel(0) != data.channel(15)
    path = os.path.join(tmp, "data.bin")
    data.save(path)
    again = acpc.Dataset.load(path)
    assert again.samples(3) == data.samples(3)
    assert again.frame_labels(3) == data.frame_labels(3)

    config = "\n".join([
        "predictions = 2", "window = 4", "negatives = 4", "dim = 8", "hidden = 8",
        "batch_size = 4", "epochs = 1", "eval_sequences = 2",
        f"data = {path}", f"out_dir = {os.path.join(tmp, 'run')}",
    ])
    losses = acpc.train_run(config)
    assert len(losses) == 4 and all(math.isfinite(l) for l in losses), losses
    rows = acpc.evaluate(os.path.join(tmp, "run", "checkpoint.bin"), again)
    names = {(n, s) for n, s, _ in rows}
    assert ("probe_accuracy", "val") in names and ("nmi_k16", "latent") in names

    try:
        acpc.Dataset.load(os.path.join(tmp, "missing.bin"))
    except OSError:
        pass
    else:
        raise AssertionError("loading a missing file should raise")


def check_oracles():
    failed = [name for name, ok, _ in acpc.run_oracles(0) if not ok]
    assert not failed, failed
    wall, count, exact = acpc.bench("negatives = 16\nlatents = 40\nrepeats = 1\nbatch_size = 2\n")
    assert exact and abs(count - 4 / 12) < 1e-12 and wall > 0


def main():
    check_alignment()
    with tempfile.TemporaryDirectory() as tmp:
        check_training(tmp)
    check_oracles()
    print("python smoke test passed")


if __name__ == "__main__":
    main()

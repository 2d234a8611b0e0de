"""Smoke test for the sgpsam_py extension.

Build first:
    cargo build --release -p sgpsam-py --features extension-module
then run:
    python3 python/smoke_test.py [path/to/libsgpsam_py.so]
"""

import importlib.util
import math
import random
import shutil
import sys
import tempfile
from pathlib import Path

ROOT = Path(__file__).resolve().parent.parent


def load_extension():
    if len(sys.argv) > 1:
        lib = Path(sys.argv[1])
    else:
        candidates = [ROOT / "target" / p / "libsgpsam_py.so" for p in ("release", "debug")]
        lib = next((c for c in candidates if c.exists()), None)
        if lib is None:
            sys.exit("libsgpsam_py.so not found; build with cargo build --release -p sgpsam-py")
    tmp = Path(tempfile.mkdtemp()) / "sgpsam_py.so"
    shutil.copy(lib, tmp)
    spec = importlib.util.spec_from_file_location("sgpsam_py", tmp)
    mod = importlib.util.module_from_spec(spec)
    spec.loader.exec_module(mod)
    return mod


def main():
    sg = load_extension()

    # axis summaries of 0..15 in (2,2,2,2) row-major order
    h, w, d, c = sg.axis_summaries([float(i) for i in range(16)], [2, 2, 2, 2])
    assert c == [7.0, 8.0], c
    assert all(abs(sum(v) / len(v) - 7.5) < 1e-12 for v in (h, w, d, c))

    soft, hard = sg.gumbel_sigmoid(0.3)
    assert 0.0 < soft < 1.0 and hard == (soft > 0.5)

    # voxel-balanced focal term worked example
    f = sg.focal_term([0.9, 0.2], [1.0, 0.0], [2], alpha=0.75, gamma=2.0)
    assert abs(f - 1.511e-3) < 1e-6, f

    rng = random.Random(0)
    for _ in range(50):
        a = [float(rng.random() < 0.5) for _ in range(27)]
        b = [float(rng.random() < 0.5) for _ in range(27)]
        iou, dice = sg.binary_iou_dice(a, b, [3, 3, 3])
        assert dice == 2 * iou / (1 + iou) or abs(dice - 2 * iou / (1 + iou)) < 1e-15

    shape = [3, 3, 3, 4]
    x = [rng.random() for _ in range(math.prod(shape))]
    assert sg.Msfb.identity(4).forward(x, shape) == x

    unit = sg.Sgpm(shape, seed=1)
    out, decision = unit.forward(x)
    assert abs(sum(decision["weights"]) - 1.0) < 1e-12
    if not decision["hard_gate"]:
        assert out == x

    model = sg.Model('volume_shape = [16, 16, 16]\n[encoder]\npatch_size = 8\nembed_channels = 8\nnum_blocks = 2\nheads = 2\nsgpm_layers = "1-2"\n', seed=0)
    image, label, vshape, prompts = sg.generate_sample(index=0, seed=42, size=16)
    probs, gates = model.predict(image, prompts)
    assert len(probs) == math.prod(vshape) and all(0.0 < p < 1.0 for p in probs)
    assert len(gates) == model.gate_count

    report = sg.gradcheck("loss", 0)
    assert report["passed"], report

    print(f"sgpsam_py smoke test passed ({model.parameter_count} params, {len(gates)} gates)")


if __name__ == "__main__":
    main()

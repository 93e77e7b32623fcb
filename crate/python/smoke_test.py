"""Smoke test for the traumakit Python bindings.

Build first with `cargo build --release -p traumakit-py`, then run
`python3 python/smoke_test.py`. The script loads the compiled library
straight from the cargo target directory.
"""

import importlib.machinery
import importlib.util
import json
import math
import pathlib
import sys
import tempfile

ROOT = pathlib.Path(__file__).resolve().parent.parent


def load():
    for profile in ("release", "debug"):
        lib = ROOT / "target" / profile / "libtraumakit_py.so"
        if lib.exists():
            loader = importlib.machinery.ExtensionFileLoader("traumakit_py", str(lib))
            spec = importlib.util.spec_from_loader("traumakit_py", loader)
            module = importlib.util.module_from_spec(spec)
            loader.exec_module(module)
            return module
    sys.exit("libtraumakit_py.so not found; run `cargo build --release -p traumakit-py`")


def main():
    tk = load()
    schema = tk.LabelSchema()
    assert schema.total_states() == 11, schema

    study = tk.generate_study(7)
    d, h, w = study.shape
    assert len(study.volume()) == d * h * w
    assert len(study.labels) == len(schema.group_names())

    data, shape = study.prepare(json.dumps({"seq_len": 4, "height": 16, "width": 16}))
    assert shape == [4, 3, 16, 16] and len(data) == math.prod(shape)

    net = tk.TraumaNet(3, json.dumps({"seq_len": 4, "height": 16, "width": 16, "widths": [4, 4, 8, 8], "hidden": 4}))
    scores, out_shape = net.forward([float(v) for v in data], [1, *shape])
    assert out_shape == [1, 4, 11]
    # The head starts at zero, so every score is zero before training.
    assert all(s == 0.0 for s in scores)

    assert abs(tk.dice_loss([1, 1, 0, 0], [1, 1, 0, 0])) < 1e-6
    assert tk.normalize_labels([0.0, 2.0, 4.0]) == [0.0, 0.5, 1.0]

    slices = [[0.2] * 11, [0.4] * 11]
    assert tk.slice_ensemble([slices]) == slices
    patient = tk.patient_aggregate(slices)
    truth = {"a": [0, 0, 0, 0]}
    report = json.loads(tk.evaluate({"a": patient}, truth))
    assert report["final_score"] > 0

    with tempfile.TemporaryDirectory() as tmp:
        manifest = json.loads(tk.generate_dataset(1, 2, tmp))
        assert len(manifest["studies"]) == 2

    print(f"traumakit_py {tk.__version__}: smoke test passed")


if __name__ == "__main__":
    main()

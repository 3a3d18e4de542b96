"""Smoke test for the eqlinker_py extension.

Build with `cargo build --release -p eqlinker-py`, then run
`python3 crates/py/python/smoke.py`. The script copies the built library
next to itself under the importable module name.
"""

import json
import pathlib
import shutil
import sys

HERE = pathlib.Path(__file__).resolve().parent
ROOT = HERE.parents[2]


def load():
    for name in ("libeqlinker_py.so", "libeqlinker_py.dylib"):
        built = ROOT / "target" / "release" / name
        if built.exists():
            shutil.copy(built, HERE / "eqlinker_py.so")
            break
    else:
        sys.exit("build the extension first: cargo build --release -p eqlinker-py")
    sys.path.insert(0, str(HERE))
    import eqlinker_py

    return eqlinker_py


def main():
    eq = load()
    data = eq.gen_data(6, json.dumps({"seed": 3}))
    assert len(data) == 6 and data == eq.gen_data(6, json.dumps({"seed": 3}))

    config = {"epochs": 1, "batch_size": 3, "max_linker_nodes": 6}
    config["model"] = {"enc_layers": 1, "dec_layers": 1}
    ckpt, report = eq.train(data, json.dumps(config))
    assert json.loads(report)["epochs"], "training report has no epochs"

    gens = eq.sample(ckpt, data, json.dumps({"k": 2, "max_linker_nodes": 6, "seed": 1}))
    assert len(gens) == 12
    scores = json.loads(eq.evaluate(ckpt, gens, data, data))
    assert 0.0 <= scores["validity"] <= 100.0

    audit = json.loads(eq.audit(ckpt, data[:2], json.dumps({"transforms": 4})))
    print(f"validity {scores['validity']:.1f}%, audit coord deviation {audit['coord_dev']:.2e}")

    try:
        eq.gen_data(0)
    except ValueError as e:
        print(f"rejected n=0: {e}")
    else:
        sys.exit("n=0 was accepted")
    print("smoke ok")


if __name__ == "__main__":
    main()

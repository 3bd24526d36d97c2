# SPDX-License-Identifier: MIT OR Apache-2.0
"""Smoke test for the pyvalsteer extension.

Build and install first:
    maturin build --release -m crates/py/Cargo.toml -o dist
    pip install dist/pyvalsteer-*.whl
"""

import json
import pathlib
import tempfile

import pyvalsteer as vs

ROOT = pathlib.Path(__file__).resolve().parent.parent
SMOKE = ROOT / "crates" / "core" / "data" / "smoke"


def main():
    taxonomy = vs.Taxonomy.default()
    assert len(taxonomy) == 31, len(taxonomy)

    scenario = "Destroying an oil rig to save 100 babies from dying of cancer."
    ranked = vs.gate_top_k(scenario, k=6)
    print("top values:", ", ".join(f"{v} {s:.2f}" for v, s in ranked))

    model = vs.ReferenceModel(seed=0)
    bank = model.estimate("benevolence", layers=[3, 4, 5], max_pairs=6)
    # hidden-state norms are around 18 here, so use a comparable magnitude
    plan = vs.SteeringPlan.fixed(bank, "benevolence", alpha=16.0)
    base = model.generate(scenario, max_tokens=16)
    steered = model.generate(scenario, max_tokens=16, plan=plan)
    assert steered != base
    print("unsteered:", repr(base))
    print("steered:  ", repr(steered))

    assert abs(vs.js_distance([1.0, 0.0], [0.5, 0.5]) - 0.557923) < 1e-6
    ci = vs.bootstrap_ci([float(i) for i in range(1, 11)], iterations=1000, seed=42)
    print("bootstrap:", ci)

    with tempfile.TemporaryDirectory() as tmp:
        cfg = json.loads((SMOKE / "distributional.json").read_text())
        for key in ("inputs", "gold"):
            cfg[key] = str(SMOKE / cfg[key])
        cfg["output_dir"] = str(pathlib.Path(tmp) / "out")
        path = pathlib.Path(tmp) / "cfg.json"
        path.write_text(json.dumps(cfg))
        assert vs.validate_config(str(path)) == []
        manifest = json.loads(vs.run_pipeline(str(path)))
        print("artifacts:", [a["path"] for a in manifest["artifacts"]])

    print("ok")


if __name__ == "__main__":
    main()

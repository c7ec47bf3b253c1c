#!/usr/bin/env python3
"""Smoke test for the schema_py extension module.

Build the module first:

    cargo build -p schema-py

then run this script from anywhere inside the repository:

    python3 python/smoke_test.py
"""

import math
import shutil
import sys
import tempfile
from pathlib import Path


def load_module():
    root = Path(__file__).resolve().parent.parent
    candidates = [
        root / "target" / profile / name
        for profile in ("release", "debug")
        for name in ("libschema_py.so", "schema_py.so", "libschema_py.dylib")
    ]
    built = next((p for p in candidates if p.exists()), None)
    if built is None:
        sys.exit("schema_py is not built; run `cargo build -p schema-py` first")
    # Python imports by module name, so stage the library under it.
    stage = Path(tempfile.mkdtemp(prefix="schema_py_"))
    shutil.copy2(built, stage / "schema_py.so")
    sys.path.insert(0, str(stage))
    import schema_py

    return schema_py


def check(name, cond):
    if not cond:
        sys.exit(f"FAIL {name}")
    print(f"ok {name}")


def main():
    sp = load_module()

    world = sp.World(
        num_tasks=2,
        steps_per_task=3,
        feature_dim=8,
        observation_noise_sigma=0.05,
        videos_per_task=6,
        descriptions_per_side=2,
        seed=11,
    )
    check("world shape", world.num_classes == 6 and world.num_videos == 12)

    desc = world.description(0)
    check(
        "description sets",
        len(desc["before"]) == 2
        and len(desc["after"]) == 2
        and desc["verb"] not in desc["before"][0].split(),
    )

    prompt = sp.build_prompt(desc["task"], desc["step"], k=2)
    check("prompt mentions the step", desc["step"] in prompt)
    raw = sp.mock_completion(desc["task"], desc["step"], desc["verb"], k=2, seed=11)
    parsed = sp.parse_response(raw, k=2)
    check(
        "mock round trip",
        parsed["before"] == desc["before"] and parsed["after"] == desc["after"],
    )

    train, test = world.split(3, ratio=0.7, seed=1)
    check("split", len(train) > 0 and len(test) > 0)
    s = train.sample(0)
    check("sample shape", len(s["steps"]) == 3 and len(s["s0"]) == 8)

    planner = sp.Planner(
        world, embed_dim=16, blocks=1, heads=2, hidden=16, dropout=0.1, seed=3
    )
    check("params allocated", planner.num_params > 1000)

    log = planner.train(train, test, epochs=3, batch_size=16, lr=5e-3, seed=3)
    check(
        "training log",
        len(log) == 3 and all(math.isfinite(e["l_step"]) for e in log),
    )

    rows = planner.evaluate(test, mode="viterbi", transition_from=train)
    check(
        "evaluation rows",
        len(rows) == 1 and rows[0]["t"] == 3 and 0.0 <= rows[0]["sr"] <= 100.0,
    )

    plans = planner.plan(test, mode="argmax")
    check(
        "argmax plans",
        len(plans) == len(test)
        and all(len(p["steps"]) == 3 and p["score"] <= 0.0 for p in plans),
    )

    draws = planner.sample_plans(test, 0, n=5, seed=9, sigma=0.5)
    check("probabilistic draws", len(draws) == 5 and all(p["mode"] == "prob" for p in draws))

    singles_train, singles_test = world.split(1, ratio=0.7, seed=1)
    acc = planner.stepcls(singles_test)
    check("stepcls accuracy in range", 0.0 <= acc <= 100.0)

    path, score = sp.viterbi_decode(
        [[0.6, 0.4], [0.5, 0.5]], 2, sequences=[[0, 1], [0, 1]]
    )
    check("viterbi prefers the observed transition", path == [0, 1] and score < 0.0)

    sr, macc, miou = sp.sequence_metrics([[0, 1], [1, 1]], [[0, 1], [1, 0]])
    check("sequence metrics", sr == 50.0 and macc == 75.0)

    with tempfile.TemporaryDirectory() as td:
        ckpt = Path(td) / "model.json"
        planner.save(ckpt)
        reloaded = sp.Planner.load(ckpt)
        again = reloaded.plan(test, mode="argmax")
        check(
            "checkpoint round trip",
            [p["steps"] for p in again] == [p["steps"] for p in plans]
            and [p["score"] for p in again] == [p["score"] for p in plans],
        )

    print("smoke test passed")


if __name__ == "__main__":
    main()

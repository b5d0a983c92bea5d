"""Reproduce the verified planted task family used by the acceptance suite.

For each candidate seed:
  1. walk the generator's sample draws and keep the first one whose zero-shot
     accuracy falls inside [1/C, 0.8] (the same config-independent gate
     generate_task applies first, so feeding the result back as a planted
     spec reproduces the identical task);
  2. compute a candidate configuration by exhaustive per-branch enumeration
     with the scratch-training oracle (image branch holding the text branch
     fully prompted, then the text branch holding that image optimum), and
     verify it is a coordinate fixed point: re-enumerating either branch
     while holding the other at the candidate must reproduce the candidate;
  3. keep the seed if the candidate, trained at the full budget, clears the
     planted gates (accuracy >= 0.9, gain over zero-shot >= 0.1, shallow
     baseline between zero-shot and the optimum) and the 60-epoch search
     recovers at least 60% of its layers.

Writes/updates tests/family_constants.py (FAMILY_OUT overrides the path).
One seed takes roughly 25 minutes of CPU; run with a list of seeds:

    python tools/design_family.py 0 1 2 3 4
"""

import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from promptsearch import seeding
from promptsearch import data as data_mod
from promptsearch.data import PlantedSpec
from promptsearch.encoder import init_pretrained
from promptsearch.search import SearchConfig, run_search, scratch_enumerate_branch
from promptsearch.supprompt import PromptConfiguration, SearchSpace
from promptsearch.train import TrainConfig, evaluate, shallow_baseline, train_subprompt

SPACE = (0, 2, 4, 6)
NOISE = 1.5
QUANTILE = 0.7
NUM_LABELS = 4
SHOTS = 16
ORACLE_EPOCHS = 24
RECOVERY_FLOOR = 0.6


def first_windowed_task(model, seed):
    dense = PromptConfiguration(text=(6,) * 4, image=(6,) * 4, space=SPACE)
    probe = PlantedSpec(configuration=dense, margin_quantile=QUANTILE, inject_teacher=False)
    text_pool = data_mod._text_sequences(
        seeding.rng_from(seed, seeding.TASK, 1), NUM_LABELS, model.text_cfg)
    for attempt in range(data_mod.MAX_GENERATION_ATTEMPTS):
        rng = seeding.rng_from(seed, seeding.TASK, 3, attempt)
        pos = rng.normal(0.0, 1.0, size=(model.image_cfg.base_seq_len - 1,
                                         model.image_cfg.hidden_dim))
        geom = data_mod._select_geometry(model, text_pool, None, probe,
                                         NUM_LABELS, pos, rng)
        if geom is None:
            continue
        task = data_mod._assemble_task(seed, model.seed, NUM_LABELS, SHOTS,
                                       geom[0], geom[1], NOISE,
                                       data_mod.TEST_PER_LABEL, probe, rng)
        zs = evaluate(model, task, None, task.test)
        if 1.0 / NUM_LABELS <= zs <= data_mod.ZERO_SHOT_CEILING:
            return task, zs
    return None, None


def fixed_point_candidate(model, task, space):
    dense = PromptConfiguration(text=(6,) * 4, image=(6,) * 4, space=SPACE)
    image = scratch_enumerate_branch(model, task, space, "image", dense,
                                     epochs=ORACLE_EPOCHS)[0][0]
    text = scratch_enumerate_branch(
        model, task, space, "text",
        PromptConfiguration(text=dense.text, image=image, space=SPACE),
        epochs=ORACLE_EPOCHS)[0][0]
    cand = PromptConfiguration(text=text, image=image, space=SPACE)
    image_check = scratch_enumerate_branch(model, task, space, "image", cand,
                                           epochs=ORACLE_EPOCHS)[0][0]
    text_check = scratch_enumerate_branch(model, task, space, "text", cand,
                                          epochs=ORACLE_EPOCHS)[0][0]
    return cand, image_check == cand.image and text_check == cand.text


def design_seed(model, seed):
    space = SearchSpace(SPACE)
    task, zs = first_windowed_task(model, seed)
    if task is None:
        return None, "no sample draw inside the zero-shot window"
    t0 = time.time()
    argmin, stable = fixed_point_candidate(model, task, space)
    prompts, _ = train_subprompt(model, task, argmin, TrainConfig(seed=seed))
    acc = evaluate(model, task, prompts, task.test)
    shallow = shallow_baseline(model, task, TrainConfig(seed=seed))
    found, _ = run_search(model, task, space, SearchConfig(seed=seed))
    rec = float(np.mean([a == b for a, b in zip(
        list(found.text) + list(found.image),
        list(argmin.text) + list(argmin.image))]))
    record = {
        "seed": seed, "zs": zs, "argmin_text": list(argmin.text),
        "argmin_image": list(argmin.image), "argmin_acc": acc,
        "shallow": shallow, "stable": bool(stable),
        "found_text": list(found.text), "found_image": list(found.image),
        "recovery": rec, "minutes": round((time.time() - t0) / 60, 1),
    }
    if not stable:
        return record, "candidate is not a coordinate fixed point"
    if acc < data_mod.PLANTED_ACCURACY_FLOOR:
        return record, f"argmin trains to {acc:.3f} < 0.9"
    if acc - zs < data_mod.PLANTED_GAIN_FLOOR:
        return record, f"gain {acc - zs:.3f} < 0.1"
    if not (acc >= shallow >= zs):
        return record, f"shallow baseline {shallow:.3f} breaks the ordering"
    if rec < RECOVERY_FLOOR:
        return record, f"search recovery {rec:.2f} < {RECOVERY_FLOOR}"
    return record, None


def write_constants(path: Path, specs: dict):
    lines = [
        '"""Planted family constants; generated by tools/design_family.py."""',
        "",
        "FAMILY_SPECS = {",
    ]
    for seed in sorted(specs):
        text, image = specs[seed]
        lines.append(f"    {seed}: ({tuple(text)}, {tuple(image)}),")
    lines.append("}")
    path.write_text("\n".join(lines) + "\n")


def main(argv):
    seeds = [int(s) for s in argv] or list(range(8))
    model = init_pretrained(0)
    path = Path(os.environ.get(
        "FAMILY_OUT",
        Path(__file__).resolve().parents[1] / "tests" / "family_constants.py",
    ))
    specs = {}
    if path.exists():
        namespace: dict = {}
        exec(path.read_text(), namespace)
        specs.update(namespace.get("FAMILY_SPECS", {}))
    for seed in seeds:
        record, why = design_seed(model, seed)
        if record is None:
            print(f"seed {seed}: rejected ({why})", flush=True)
            continue
        print(json.dumps(record), flush=True)
        if why is None:
            specs[seed] = (tuple(record["argmin_text"]), tuple(record["argmin_image"]))
            write_constants(path, specs)
            print(f"seed {seed}: accepted -> {path}", flush=True)
        else:
            print(f"seed {seed}: rejected ({why})", flush=True)
    print(f"{len(specs)} accepted seeds total", flush=True)


if __name__ == "__main__":
    main(sys.argv[1:])

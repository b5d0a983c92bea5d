"""Command-line entry point: generate / search / train / inspect.

Every command resolves a RunConfig from defaults, then an optional JSON
config file, then flags; the resolved config is written next to the other
artifacts so a run directory is self-describing. All randomness flows from
the explicit seeds, so reruns produce byte-identical artifacts.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import sys
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .data import FewShotTask, PlantedSpec, generate_task
from .encoder import BranchConfig, DualEncoder, init_pretrained
from .errors import ContractError, DimensionError, GenerationError
from .metrics import alpha_difference, fragile_rows, is_single_dominant, num_dominants
from .search import METRICS_COLUMNS, SearchConfig, run_search
from .supprompt import (
    PromptConfiguration,
    SearchSpace,
    count_subprompt_params,
    search_space_size,
)
from .train import TrainConfig, evaluate, shallow_baseline, train_subprompt


@dataclass
class RunConfig:
    seed: int = 0
    model_seed: int = 0
    num_labels: int = 4
    shots: int = 16
    noise_std: float = 1.0
    teacher_scale: float = 4.0
    margin_quantile: float = 1.0
    inject_teacher: bool = True
    planted_text: list | None = None
    planted_image: list | None = None
    space: list = None
    depth: int = 4
    hidden_dim: int = 32
    num_heads: int = 4
    text_seq_len: int = 8
    patches: int = 16
    epochs_search: int = 60
    epochs_train: int = 40
    batch_size: int = 4
    lr_alpha: float = 0.5
    lr_prompts: float = 0.5
    lr_train: float = 0.5
    distill_weight: float = 0.0
    shallow: bool = False
    repeat: int = 1
    out: str = "runs/latest"

    def __post_init__(self):
        if self.space is None:
            self.space = [0, 2, 4, 6]

    def text_cfg(self) -> BranchConfig:
        return BranchConfig(self.depth, self.hidden_dim, self.num_heads,
                            self.text_seq_len, pool="last")

    def image_cfg(self) -> BranchConfig:
        return BranchConfig(self.depth, self.hidden_dim, self.num_heads,
                            self.patches + 1, pool="first")

    def search_space(self) -> SearchSpace:
        return SearchSpace(tuple(self.space))

    def planted(self):
        if self.planted_text is None and self.planted_image is None:
            return None
        text = tuple(self.planted_text or [0] * self.depth)
        image = tuple(self.planted_image or [0] * self.depth)
        cfg = PromptConfiguration(text=text, image=image, space=tuple(self.space))
        return PlantedSpec(configuration=cfg, teacher_scale=self.teacher_scale,
                           margin_quantile=self.margin_quantile,
                           inject_teacher=self.inject_teacher)


def _resolve_config(args) -> RunConfig:
    values = {}
    if args.config:
        values.update(json.loads(Path(args.config).read_text()))
    known = {f.name for f in fields(RunConfig)}
    unknown = set(values) - known
    if unknown:
        raise ContractError(f"unknown config keys: {sorted(unknown)}")
    flag_map = {
        "seed": args.seed, "out": args.out, "shots": args.shots,
        "epochs_search": args.epochs_search, "epochs_train": args.epochs_train,
        "distill_weight": getattr(args, "lambda_", None),
        "repeat": getattr(args, "repeat", None),
        "shallow": True if getattr(args, "shallow_baseline", False) else None,
    }
    if getattr(args, "space", None):
        flag_map["space"] = [int(v) for v in args.space.split(",")]
    values.update({k: v for k, v in flag_map.items() if v is not None})
    return RunConfig(**values)


def _write_run_config(cfg: RunConfig, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "run_config.json").write_text(
        json.dumps(asdict(cfg), sort_keys=True, indent=2) + "\n"
    )


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def cmd_generate(args) -> int:
    cfg = _resolve_config(args)
    out = Path(cfg.out)
    _write_run_config(cfg, out)
    task = generate_task(
        seed=cfg.seed, num_labels=cfg.num_labels, shots=cfg.shots,
        text_cfg=cfg.text_cfg(), img_cfg=cfg.image_cfg(), planted=cfg.planted(),
        model_seed=cfg.model_seed, noise_std=cfg.noise_std,
    )
    path = out / "task.bin"
    task.save(path)
    print(f"task written to {path}")
    print(f"checksum {_sha256(path)}")
    if task.zero_shot_accuracy is not None:
        print(f"zero-shot accuracy {task.zero_shot_accuracy:.4f}")
    if task.planted_accuracy is not None:
        print(f"planted trained accuracy {task.planted_accuracy:.4f}")
    return 0


def cmd_search(args) -> int:
    cfg = _resolve_config(args)
    out = Path(cfg.out)
    task = FewShotTask.load(args.task)
    _write_run_config(cfg, out)
    model = init_pretrained(task.model_seed, cfg.text_cfg(), cfg.image_cfg())
    space = cfg.search_space()
    scfg = SearchConfig(epochs=cfg.epochs_search, batch_size=cfg.batch_size,
                        lr_alpha=cfg.lr_alpha, lr_prompts=cfg.lr_prompts, seed=cfg.seed)
    configuration, trace = run_search(model, task, space, scfg)
    configuration.save(out / "config.json")
    trace.write_metrics_csv(out / "metrics.csv")
    trace.write_alpha_csv(out / "alpha_trace_text.csv", "text", space)
    trace.write_alpha_csv(out / "alpha_trace_image.csv", "image", space)
    print(f"configuration text={list(configuration.text)} image={list(configuration.image)}")
    if trace.records:
        last = trace.records[-1]
        print(f"final alpha difference text={last.alpha_diff_text:.4f} image={last.alpha_diff_image:.4f}")
        print(f"final dominants text={last.dominants_text} image={last.dominants_image}")
    return 0


def _train_once(model, task, configuration, cfg: RunConfig, seed: int) -> dict:
    tcfg = TrainConfig(epochs=cfg.epochs_train, batch_size=cfg.batch_size,
                       lr=cfg.lr_train, distill_weight=cfg.distill_weight, seed=seed)
    prompts, history = train_subprompt(model, task, configuration, tcfg)
    report = {
        "seed": seed,
        "zero_shot_acc": evaluate(model, task, None, task.test),
        "dpl_acc": evaluate(model, task, prompts, task.test),
        "final_train_loss": history[-1]["loss"] if history else None,
    }
    if cfg.shallow:
        report["shallow_acc"] = shallow_baseline(model, task, tcfg)
    return report, prompts, history


def cmd_train(args) -> int:
    cfg = _resolve_config(args)
    out = Path(cfg.out)
    task = FewShotTask.load(args.task)
    configuration = PromptConfiguration.load(args.configuration)
    _write_run_config(cfg, out)
    model = init_pretrained(task.model_seed, cfg.text_cfg(), cfg.image_cfg())
    runs = []
    for i in range(max(1, cfg.repeat)):
        report, prompts, history = _train_once(model, task, configuration, cfg, cfg.seed + i)
        runs.append(report)
        if i == 0:
            prompts.save(out / "prompts.bin", cfg.seed, cfg.distill_weight)
            _append_train_metrics(out / "metrics.csv", history)
    report = {
        "lambda": cfg.distill_weight,
        "configuration": configuration.to_json(),
        "runs": runs,
        "zero_shot_acc": float(np.mean([r["zero_shot_acc"] for r in runs])),
        "dpl_acc": float(np.mean([r["dpl_acc"] for r in runs])),
    }
    if cfg.repeat > 1:
        report["dpl_acc_std"] = float(np.std([r["dpl_acc"] for r in runs]))
    if cfg.shallow:
        report["shallow_acc"] = float(np.mean([r["shallow_acc"] for r in runs]))
        if cfg.repeat > 1:
            report["shallow_acc_std"] = float(np.std([r["shallow_acc"] for r in runs]))
    (out / "report.json").write_text(json.dumps(report, sort_keys=True, indent=2) + "\n")
    print(f"zero_shot_acc {report['zero_shot_acc']:.4f}")
    print(f"dpl_acc {report['dpl_acc']:.4f}")
    if "shallow_acc" in report:
        print(f"shallow_acc {report['shallow_acc']:.4f}")
    print(f"report written to {out / 'report.json'}")
    return 0


def _append_train_metrics(path: Path, history: list[dict]) -> None:
    exists = path.exists()
    with open(path, "a", newline="") as f:
        w = csv.writer(f)
        if not exists:
            w.writerow(METRICS_COLUMNS)
        for h in history:
            w.writerow(["train", h["epoch"], "", "", "", "",
                        f"{h['loss']:.12g}", "", f"{h['kl']:.12g}"])


def _print_alpha_table(alpha: np.ndarray, space_lengths, title: str) -> None:
    print(title)
    header = "len\\layer " + " ".join(f"{l:>9d}" for l in range(alpha.shape[0]))
    print(header)
    for j, c in enumerate(space_lengths):
        row = " ".join(f"{alpha[l, j]:9.4f}" for l in range(alpha.shape[0]))
        print(f"{c:>9d} {row}")
    print(f"alpha difference {alpha_difference(alpha):.4f}")
    print(f"dominants {num_dominants(alpha)}")
    print(f"single-dominant: {is_single_dominant(alpha)}")
    frag = fragile_rows(alpha)
    print(f"fragile rows: {frag if frag else 'none'}")


def cmd_inspect(args) -> int:
    path = Path(args.artifact)
    if not path.exists():
        raise FileNotFoundError(f"no such artifact: {path}")
    if path.suffix == ".json":
        obj = json.loads(path.read_text())
        if {"text", "image", "space"} <= set(obj):
            config = PromptConfiguration.from_json(obj)
            d = args.hidden_dim
            print(f"text lengths  {list(config.text)}")
            print(f"image lengths {list(config.image)}")
            print(f"space {list(config.space)}")
            print(f"prompt parameters {count_subprompt_params(config, d, d)}")
            space = SearchSpace(config.space) if config.space[0] == 0 else None
            if space:
                print(f"search space size {search_space_size(space, len(config.text), len(config.image))}")
        else:
            print(json.dumps(obj, sort_keys=True, indent=2))
        return 0
    if path.suffix == ".csv":
        with open(path, newline="") as f:
            rows = list(csv.DictReader(f))
        if not rows:
            raise ContractError(f"{path} is empty")
        if "alpha_diff_txt" in rows[0]:
            search_rows = [r for r in rows if r.get("stage", "search") == "search"]
            first, last = search_rows[0], search_rows[-1]
            print(f"epochs {len(search_rows)}")
            print(f"alpha difference text  first {first['alpha_diff_txt']} last {last['alpha_diff_txt']}")
            print(f"alpha difference image first {first['alpha_diff_img']} last {last['alpha_diff_img']}")
            return 0
        if "layer" in rows[0]:
            last_epoch = rows[-1]["epoch"]
            sub = [r for r in rows if r["epoch"] == last_epoch]
            lengths = [int(k[4:]) for k in rows[0] if k.startswith("len_")]
            alpha = np.array([[float(r[f"len_{c}"]) for c in lengths] for r in sub])
            _print_alpha_table(alpha, lengths, f"alpha at epoch {last_epoch} (rows=lengths, cols=layers)")
            return 0
        raise ContractError(f"unrecognized CSV layout in {path}")
    raw = path.read_bytes()
    nl = raw.index(b"\n") if b"\n" in raw else -1
    header = json.loads(raw[:nl].decode("utf-8")) if nl > 0 else {}
    kind = header.get("kind")
    if kind == "task":
        print(f"task seed {header['seed']} model_seed {header['model_seed']}")
        print(f"labels {header['num_labels']} shots {header['shots']} noise_std {header['noise_std']}")
        if header.get("planted"):
            planted = header["planted"]["configuration"]
            print(f"planted text  {planted['text']}")
            print(f"planted image {planted['image']}")
        if header.get("zero_shot_accuracy") is not None:
            print(f"zero-shot accuracy {header['zero_shot_accuracy']:.4f}")
        return 0
    if kind == "model":
        model = DualEncoder.load(path)
        n = sum(t.data.size for _, t in model.weight_items())
        print(f"model seed {header['seed']} weights {n}")
        print(f"checksum {model.weight_checksum()}")
        return 0
    if kind == "prompts":
        config = PromptConfiguration.from_json(header["configuration"])
        d = args.hidden_dim
        print(f"trained prompts for text={list(config.text)} image={list(config.image)}")
        print(f"lambda {header['lambda']} seed {header['seed']}")
        print(f"prompt parameters {count_subprompt_params(config, d, d)}")
        return 0
    raise ContractError(f"unknown artifact format: {path}")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="promptsearch",
                                description="Per-layer prompt context-length search")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="JSON config file")
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--shots", type=int)
        sp.add_argument("--epochs-search", dest="epochs_search", type=int)
        sp.add_argument("--epochs-train", dest="epochs_train", type=int)
        sp.add_argument("--lambda", dest="lambda_", type=float)
        sp.add_argument("--space", help="comma separated lengths, e.g. 0,2,4,6")

    g = sub.add_parser("generate", help="generate a task file")
    common(g)
    g.set_defaults(fn=cmd_generate)

    s = sub.add_parser("search", help="run the context-length search")
    common(s)
    s.add_argument("--task", required=True, help="task file from `generate`")
    s.set_defaults(fn=cmd_search)

    t = sub.add_parser("train", help="train and evaluate a configuration")
    common(t)
    t.add_argument("--task", required=True)
    t.add_argument("--configuration", required=True, help="config.json from `search`")
    t.add_argument("--shallow-baseline", action="store_true")
    t.add_argument("--repeat", type=int)
    t.set_defaults(fn=cmd_train)

    i = sub.add_parser("inspect", help="summarize an artifact")
    i.add_argument("artifact")
    i.add_argument("--hidden-dim", dest="hidden_dim", type=int, default=32)
    i.set_defaults(fn=cmd_inspect)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (ContractError, DimensionError, GenerationError, FileNotFoundError,
            json.JSONDecodeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # internal failure
        print(f"internal error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

"""Synthetic few-shot classification tasks with a plantable ground truth.

A task pairs per-class text token sequences with noisy image samples drawn
around class prototypes. When a planted configuration is requested, the
generator draws a hidden set of "teacher" prompts at exactly those layers
and lengths, labels candidate prototypes with the teacher-prompted model,
and keeps only prototypes the teacher classifies with a margin. Prompts of
the planted lengths at the planted layers are then sufficient to separate
the labels, while the prompt-free model is verifiably mediocre; both facts
are checked at generation time by direct training and the task is redrawn
(up to 10 times) if either check fails.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from . import seeding
from .encoder import BranchConfig, DualEncoder, default_image_config, default_text_config, init_pretrained
from .errors import ContractError, DimensionError, GenerationError
from .supprompt import PromptConfiguration

TEST_PER_LABEL = 32
MAX_GENERATION_ATTEMPTS = 10
LABEL_POOL_FACTOR = 8

ZERO_SHOT_FLOOR_MARGIN = 0.0   # zero-shot accuracy must reach 1/C exactly
ZERO_SHOT_CEILING = 0.8
PLANTED_ACCURACY_FLOOR = 0.9
PLANTED_GAIN_FLOOR = 0.1


@dataclass(frozen=True)
class PlantedSpec:
    """Ground-truth configuration plus the signal-injection rule parameters.

    The injection rule has two independent dials: ``inject_teacher`` draws
    hidden prompts at the configuration's layers and labels prototypes with
    the teacher-prompted model (signal readable only through those layers),
    while ``margin_quantile`` sets how confidently the labeling model must
    classify the chosen prototypes, which directly controls the zero-shot
    accuracy of the resulting task. With ``inject_teacher=False`` the ground
    truth comes from per-sample noise alone: prompts earn their accuracy by
    denoising, and which layers help is a property of the frozen encoder.
    """

    configuration: PromptConfiguration
    teacher_scale: float = 4.0      # std of the hidden teacher prompts
    candidate_factor: int = 16      # candidate prototypes drawn per class
    margin_quantile: float = 1.0    # 1.0 keeps the best-margin prototypes
    inject_teacher: bool = True

    def to_json(self) -> dict:
        return {
            "configuration": self.configuration.to_json(),
            "teacher_scale": self.teacher_scale,
            "candidate_factor": self.candidate_factor,
            "margin_quantile": self.margin_quantile,
            "inject_teacher": self.inject_teacher,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "PlantedSpec":
        return cls(
            configuration=PromptConfiguration.from_json(obj["configuration"]),
            teacher_scale=obj["teacher_scale"],
            candidate_factor=obj["candidate_factor"],
            margin_quantile=obj["margin_quantile"],
            inject_teacher=obj.get("inject_teacher", True),
        )

    @property
    def is_all_zero(self) -> bool:
        return not any(self.configuration.text) and not any(self.configuration.image)


@dataclass
class Split:
    images: np.ndarray   # (n, patches, d_img)
    labels: np.ndarray   # (n,)
    tag: str = "train"

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.shape[0] != self.labels.shape[0]:
            raise DimensionError(
                f"{self.images.shape[0]} images vs {self.labels.shape[0]} labels"
            )

    def __len__(self) -> int:
        return int(self.labels.shape[0])


@dataclass
class Batch:
    images: np.ndarray
    labels: np.ndarray
    tag: str

    def __len__(self) -> int:
        return int(self.labels.shape[0])


@dataclass
class FewShotTask:
    seed: int
    model_seed: int
    num_labels: int
    shots: int
    text_tokens: np.ndarray   # (C, text_seq_len, d_txt)
    prototypes: np.ndarray    # (C, patches, d_img)
    train: Split
    test: Split
    noise_std: float
    planted: Optional[PlantedSpec] = None
    zero_shot_accuracy: Optional[float] = None  # measured at generation
    planted_accuracy: Optional[float] = None    # measured at generation

    def checksum(self) -> str:
        h = hashlib.sha256()
        for arr in (self.text_tokens, self.prototypes, self.train.images,
                    self.train.labels, self.test.images, self.test.labels):
            h.update(np.ascontiguousarray(arr).astype("<f8").tobytes())
        return h.hexdigest()

    # -- persistence -------------------------------------------------------

    def save(self, path) -> None:
        arrays = [
            ("text_tokens", self.text_tokens),
            ("prototypes", self.prototypes),
            ("train_images", self.train.images),
            ("test_images", self.test.images),
        ]
        header = {
            "kind": "task",
            "seed": self.seed,
            "model_seed": self.model_seed,
            "num_labels": self.num_labels,
            "shots": self.shots,
            "noise_std": self.noise_std,
            "train_labels": self.train.labels.tolist(),
            "test_labels": self.test.labels.tolist(),
            "planted": self.planted.to_json() if self.planted else None,
            "zero_shot_accuracy": self.zero_shot_accuracy,
            "planted_accuracy": self.planted_accuracy,
            "arrays": [{"name": n, "shape": list(a.shape)} for n, a in arrays],
        }
        with open(path, "wb") as f:
            f.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
            for _, a in arrays:
                f.write(np.ascontiguousarray(a).astype("<f8").tobytes())

    @classmethod
    def load(cls, path) -> "FewShotTask":
        raw = Path(path).read_bytes()
        nl = raw.index(b"\n")
        header = json.loads(raw[:nl].decode("utf-8"))
        if header.get("kind") != "task":
            raise ContractError(f"{path} is not a task file")
        offset = nl + 1
        arrays = {}
        for spec in header["arrays"]:
            shape = tuple(spec["shape"])
            n = int(np.prod(shape))
            arrays[spec["name"]] = np.frombuffer(
                raw, dtype="<f8", count=n, offset=offset
            ).reshape(shape).copy()
            offset += n * 8
        return cls(
            seed=header["seed"],
            model_seed=header["model_seed"],
            num_labels=header["num_labels"],
            shots=header["shots"],
            text_tokens=arrays["text_tokens"],
            prototypes=arrays["prototypes"],
            train=Split(arrays["train_images"], np.array(header["train_labels"]), tag="train"),
            test=Split(arrays["test_images"], np.array(header["test_labels"]), tag="test"),
            noise_std=header["noise_std"],
            planted=PlantedSpec.from_json(header["planted"]) if header["planted"] else None,
            zero_shot_accuracy=header["zero_shot_accuracy"],
            planted_accuracy=header["planted_accuracy"],
        )


def split_for_search(task: FewShotTask) -> tuple[Split, Split]:
    """Per-label 50/50 split of the training shots by shot-index parity."""
    if task.shots % 2 != 0:
        raise ContractError(f"search split needs an even shot count, got {task.shots}")
    order = np.arange(len(task.train))
    shot_idx = order % task.shots  # samples are stored label-major
    even = shot_idx % 2 == 0
    return (
        Split(task.train.images[even], task.train.labels[even], tag="search_train"),
        Split(task.train.images[~even], task.train.labels[~even], tag="search_val"),
    )


def batches(split: Split, batch_size: int, epoch_seed) -> list[Batch]:
    """Deterministic shuffle into batches; the final partial batch is kept."""
    if batch_size < 1:
        raise ContractError(f"batch_size must be >= 1, got {batch_size}")
    keys = epoch_seed if isinstance(epoch_seed, (tuple, list)) else (epoch_seed,)
    perm = seeding.rng_from(*keys, seeding.BATCH).permutation(len(split))
    out = []
    for lo in range(0, len(split), batch_size):
        idx = perm[lo:lo + batch_size]
        out.append(Batch(split.images[idx], split.labels[idx], tag=split.tag))
    return out


# ---------------------------------------------------------------------------
# Generation
# ---------------------------------------------------------------------------

def _teacher_prompts(planted: PlantedSpec, text_cfg: BranchConfig, img_cfg: BranchConfig,
                     rng: np.random.Generator):
    """Hidden prompts realizing the planted configuration's injected signal."""
    from .autodiff import Tensor

    def branch(lengths, d):
        return [
            Tensor(rng.normal(0.0, planted.teacher_scale, size=(c, d))) if c > 0 else None
            for c in lengths
        ]

    return (
        branch(planted.configuration.text, text_cfg.hidden_dim),
        branch(planted.configuration.image, img_cfg.hidden_dim),
    )


def _text_sequences(rng: np.random.Generator, num_labels: int, cfg: BranchConfig) -> np.ndarray:
    """Candidate pool of [SOS, template tokens, label token, padding, EOS] rows."""
    c, d = cfg.base_seq_len, cfg.hidden_dim
    if c < 4:
        raise ContractError(f"text sequences need length >= 4, got {c}")
    sos = rng.normal(0.0, 1.0, size=d)
    eos = rng.normal(0.0, 1.0, size=d)
    n_template = min(3, c - 3)
    template = rng.normal(0.0, 1.0, size=(n_template, d))
    pool = rng.normal(0.0, 1.0, size=(LABEL_POOL_FACTOR * num_labels, d))
    out = np.zeros((len(pool), c, d))
    for k, label_tok in enumerate(pool):
        out[k, 0] = sos
        out[k, 1:1 + n_template] = template
        out[k, 1 + n_template] = label_tok
        out[k, c - 1] = eos
    return out


def _pick_balanced_labels(sims: np.ndarray, num_labels: int,
                          text_embs: np.ndarray) -> Optional[list[int]]:
    """Choose label sequences whose mean similarity over the candidate images
    is nearly equal, so the labeling argmax carries no global class bias.

    Among the flattest band of candidates, prefer maximal embedding spread.
    Returns pool indices or None when no balanced band exists."""
    mean_sim = sims.mean(axis=0)
    band_width = np.quantile(np.abs(mean_sim - np.median(mean_sim)), 0.35)
    band = np.flatnonzero(np.abs(mean_sim - np.median(mean_sim)) <= band_width)
    if len(band) < num_labels:
        return None
    chosen = [int(band[0])]
    while len(chosen) < num_labels:
        cos = text_embs[band] @ text_embs[chosen].T
        pick = int(band[int(cos.max(axis=1).argmin())])
        if pick in chosen:  # pool exhausted of distinct choices
            remaining = [i for i in band if i not in chosen]
            if not remaining:
                return None
            pick = remaining[0]
        chosen.append(pick)
    return chosen


def generate_task(
    seed: int,
    num_labels: int,
    shots: int,
    text_cfg: Optional[BranchConfig] = None,
    img_cfg: Optional[BranchConfig] = None,
    planted: Optional[PlantedSpec] = None,
    model_seed: int = 0,
    noise_std: float = 1.0,
    test_per_label: int = TEST_PER_LABEL,
    allow_odd_shots: bool = False,
    verify: bool = True,
) -> FewShotTask:
    """Deterministic task generation, optionally around a planted configuration.

    With a planted spec the generated task is verified by direct training:
    zero-shot accuracy must land in [1/C, 0.8] and the planted configuration,
    trained from scratch, must reach 0.9 on the test split. Both numbers are
    recorded on the task. An all-zero planted configuration degenerates to a
    task the zero-shot model already separates (>= 0.9, no training possible).
    Up to 10 sample redraws are attempted before giving up.

    ``verify=False`` skips the accuracy gates (zero-shot is still recorded);
    it exists for shot-count sweeps that reuse a verified family's planted
    spec at shot counts where the 0.9 bar is not meant to hold.
    """
    if num_labels < 2:
        raise ContractError(f"need at least 2 labels, got {num_labels}")
    if shots % 2 != 0 and not allow_odd_shots:
        raise ContractError(
            f"shots must be even for the search split, got {shots} "
            "(pass allow_odd_shots=True together with reuse_train_for_val searches)"
        )
    if shots < 1:
        raise ContractError(f"shots must be >= 1, got {shots}")
    text_cfg = text_cfg or default_text_config()
    img_cfg = img_cfg or default_image_config()
    model = init_pretrained(model_seed, text_cfg, img_cfg)

    text_rng = seeding.rng_from(seed, seeding.TASK, 1)
    text_pool = _text_sequences(text_rng, num_labels, text_cfg)

    teacher = None
    if planted is not None:
        if planted.configuration.text and len(planted.configuration.text) != text_cfg.depth:
            raise ContractError("planted text configuration does not match branch depth")
        if planted.configuration.image and len(planted.configuration.image) != img_cfg.depth:
            raise ContractError("planted image configuration does not match branch depth")
        if planted.inject_teacher:
            teacher_rng = seeding.rng_from(seed, seeding.TASK, 2)
            teacher = _teacher_prompts(planted, text_cfg, img_cfg, teacher_rng)

    patches = img_cfg.base_seq_len - 1
    d_img = img_cfg.hidden_dim
    last_failure = ""
    for attempt in range(MAX_GENERATION_ATTEMPTS):
        rng = seeding.rng_from(seed, seeding.TASK, 3, attempt)
        pos = rng.normal(0.0, 1.0, size=(patches, d_img))
        geometry = _select_geometry(model, text_pool, teacher, planted, num_labels, pos, rng)
        if geometry is None:
            last_failure = "could not cover every class with labeled prototypes"
            continue
        text_tokens, prototypes = geometry
        task = _assemble_task(
            seed, model_seed, num_labels, shots, text_tokens, prototypes,
            noise_std, test_per_label, planted, rng,
        )
        if not verify:
            from .train import evaluate

            task.zero_shot_accuracy = evaluate(model, task, None, task.test)
            return task
        ok, why = _verify_task(model, task)
        if ok:
            return task
        last_failure = why
    raise GenerationError(
        f"task generation failed after {MAX_GENERATION_ATTEMPTS} attempts: {last_failure}"
    )


def _select_geometry(model, text_pool, teacher, planted, num_labels, pos, rng):
    """Choose label sequences and one prototype per label.

    Labels are assigned by the (teacher-prompted) model's raw similarity
    argmax. Cosine argmax over a concentrated embedding cone is hub-prone,
    so the label sequences are first drawn from the flattest mean-similarity
    band; that removes any global class bias a prompt at an arbitrary layer
    could otherwise exploit. Returns (text_tokens, prototypes) or None when
    the draw cannot cover every class."""
    from .autodiff import no_grad

    factor = planted.candidate_factor if planted is not None else 16
    n_cand = factor * num_labels
    latents = rng.normal(0.0, 1.0, size=(n_cand, pos.shape[1]))
    grids = latents[:, None, :] + pos[None, :, :]
    text_prompts, image_prompts = teacher if teacher else (None, None)
    with no_grad():
        text_embs = model.encode_text_stack(text_pool, text_prompts).data
        img_embs = model.encode_image_stack(grids, image_prompts).data
    sims = img_embs @ text_embs.T  # (candidates, pool)
    chosen_labels = _pick_balanced_labels(sims, num_labels, text_embs)
    if chosen_labels is None:
        return None
    sub = sims[:, chosen_labels]
    order = np.argsort(sub, axis=1)
    pred = order[:, -1]
    margin = sub[np.arange(n_cand), order[:, -1]] - sub[np.arange(n_cand), order[:, -2]]
    quantile = planted.margin_quantile if planted is not None else 1.0
    prototypes = []
    for k in range(num_labels):
        mask = pred == k
        if not mask.any():
            return None
        idx = np.flatnonzero(mask)
        ranked = idx[np.argsort(margin[idx])]
        pick = ranked[int(round(quantile * (len(ranked) - 1)))]
        prototypes.append(grids[pick])
    return text_pool[chosen_labels], np.stack(prototypes)


def _assemble_task(seed, model_seed, num_labels, shots, text_tokens, prototypes,
                   noise_std, test_per_label, planted, rng) -> FewShotTask:
    def draw_split(per_label, tag):
        images, labels = [], []
        for k in range(num_labels):
            noise = rng.normal(0.0, noise_std, size=(per_label,) + prototypes[k].shape)
            images.append(prototypes[k][None] + noise)
            labels.extend([k] * per_label)
        return Split(np.concatenate(images), np.array(labels), tag=tag)

    return FewShotTask(
        seed=seed, model_seed=model_seed, num_labels=num_labels, shots=shots,
        text_tokens=text_tokens, prototypes=prototypes,
        train=draw_split(shots, "train"), test=draw_split(test_per_label, "test"),
        noise_std=noise_std, planted=planted,
    )


def _verify_task(model: DualEncoder, task: FewShotTask) -> tuple[bool, str]:
    """Measure zero-shot and (for planted tasks) trained planted accuracy."""
    from .train import TrainConfig, evaluate, train_subprompt

    zs = evaluate(model, task, None, task.test)
    task.zero_shot_accuracy = zs
    if task.planted is None:
        return True, ""
    floor = 1.0 / task.num_labels + ZERO_SHOT_FLOOR_MARGIN
    if task.planted.is_all_zero:
        # Nothing is trainable; the zero-shot model itself must separate labels.
        task.planted_accuracy = zs
        if zs < PLANTED_ACCURACY_FLOOR:
            return False, f"all-zero planted task has zero-shot accuracy {zs:.3f} < 0.9"
        return True, ""
    if not floor <= zs <= ZERO_SHOT_CEILING:
        return False, f"zero-shot accuracy {zs:.3f} outside [{floor:.3f}, {ZERO_SHOT_CEILING}]"
    cfg = TrainConfig(seed=task.seed)
    prompts, _ = train_subprompt(model, task, task.planted.configuration, cfg)
    planted_acc = evaluate(model, task, prompts, task.test)
    task.planted_accuracy = planted_acc
    if planted_acc < PLANTED_ACCURACY_FLOOR:
        return False, f"planted configuration trains to {planted_acc:.3f} < {PLANTED_ACCURACY_FLOOR}"
    if planted_acc - zs < PLANTED_GAIN_FLOOR:
        return False, f"planted gain {planted_acc - zs:.3f} < {PLANTED_GAIN_FLOOR}"
    return True, ""

"""Scikit-learn style wrappers around the search and training stages.

`PromptLengthSearcher.fit(X, y)` runs the bilevel context-length search and
exposes the chosen configuration; `PromptedClassifier.fit(X, y)` trains the
prompts of a given configuration and then behaves like a normal classifier.
Both treat the per-class text token sequences and the frozen encoder seed as
constructor parameters, so instances clone and grid-search like any other
estimator.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin

from .data import FewShotTask, Split
from .encoder import BranchConfig, init_pretrained
from .errors import ContractError
from .search import SearchConfig, run_search
from .supprompt import PromptConfiguration, SearchSpace
from .train import TrainConfig, predict_probs, train_subprompt
from .validation import check_image_array, check_labels, check_text_features


def _shots_per_label(y: np.ndarray, num_labels: int, require_even: bool) -> int:
    counts = np.bincount(y, minlength=num_labels)
    if counts.min() != counts.max():
        raise ContractError(
            f"few-shot estimators need the same sample count per class, got {counts.tolist()}"
        )
    shots = int(counts[0])
    if require_even and shots % 2 != 0:
        raise ContractError(f"the search split needs an even shot count, got {shots}")
    return shots


def _label_major(X: np.ndarray, y: np.ndarray, num_labels: int):
    order = np.concatenate([np.flatnonzero(y == k) for k in range(num_labels)])
    return X[order], y[order]


class _TaskBuilder:
    """Shared fit-time plumbing: validate arrays, build the internal task."""

    def _build(self, X, y, require_even_shots: bool):
        if self.text_features is None:
            raise ContractError("text_features must be provided at construction")
        text = np.asarray(self.text_features, dtype=np.float64)
        if text.ndim != 3:
            raise ContractError(f"text_features must be 3-d, got ndim={text.ndim}")
        num_labels, seq_len, d_txt = text.shape
        text = check_text_features(text, seq_len, d_txt)
        X = np.asarray(X, dtype=np.float64)
        d_img = X.shape[-1] if X.ndim == 3 else d_txt
        n_patches = X.shape[1] if X.ndim == 3 else X.shape[1] // d_img
        X = check_image_array(X, n_patches, d_img)
        y = check_labels(y, X.shape[0], num_labels)
        shots = _shots_per_label(y, num_labels, require_even_shots)
        X, y = _label_major(X, y, num_labels)
        text_cfg = BranchConfig(self.depth, d_txt, self.num_heads, seq_len, pool="last")
        image_cfg = BranchConfig(self.depth, d_img, self.num_heads, n_patches + 1, pool="first")
        model = init_pretrained(self.model_seed, text_cfg, image_cfg)
        train = Split(X, y, tag="train")
        task = FewShotTask(
            seed=self.random_state, model_seed=self.model_seed,
            num_labels=num_labels, shots=shots, text_tokens=text,
            prototypes=np.zeros((num_labels, n_patches, d_img)),
            train=train, test=train, noise_std=0.0,
        )
        return model, task


class PromptLengthSearcher(_TaskBuilder, BaseEstimator):
    """Search per-layer prompt context lengths for a frozen dual encoder.

    Parameters mirror the searching stage: candidate lengths, epochs, batch
    size and the two learning rates of the alternating updates. After ``fit``
    the chosen configuration is in ``configuration_`` and the convergence
    trace in ``trace_``.
    """

    def __init__(self, text_features=None, model_seed=0, option_lengths=(0, 2, 4, 6),
                 depth=4, num_heads=4, epochs=60, batch_size=4,
                 lr_alpha=0.5, lr_prompts=0.5, random_state=0):
        self.text_features = text_features
        self.model_seed = model_seed
        self.option_lengths = option_lengths
        self.depth = depth
        self.num_heads = num_heads
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr_alpha = lr_alpha
        self.lr_prompts = lr_prompts
        self.random_state = random_state

    def fit(self, X, y):
        model, task = self._build(X, y, require_even_shots=True)
        space = SearchSpace(tuple(self.option_lengths))
        cfg = SearchConfig(
            epochs=self.epochs, batch_size=self.batch_size,
            lr_alpha=self.lr_alpha, lr_prompts=self.lr_prompts, seed=self.random_state,
        )
        configuration, trace = run_search(model, task, space, cfg)
        self.configuration_ = configuration
        self.trace_ = trace
        self.alpha_text_ = trace.records[-1].alpha_text if trace.records else None
        self.alpha_image_ = trace.records[-1].alpha_image if trace.records else None
        self.n_features_in_ = int(np.prod(X.shape[1:])) if np.asarray(X).ndim > 1 else X.shape[1]
        return self


class PromptedClassifier(_TaskBuilder, BaseEstimator, ClassifierMixin):
    """Few-shot classifier: frozen dual encoder plus trained prompts.

    ``configuration`` fixes the per-layer prompt lengths (for example the
    result of :class:`PromptLengthSearcher`); with ``None`` no prompts are
    trained and the classifier is the zero-shot model.
    """

    def __init__(self, text_features=None, configuration=None, model_seed=0,
                 depth=4, num_heads=4, epochs=40, batch_size=4, lr=0.5,
                 distill_weight=0.0, random_state=0):
        self.text_features = text_features
        self.configuration = configuration
        self.model_seed = model_seed
        self.depth = depth
        self.num_heads = num_heads
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.distill_weight = distill_weight
        self.random_state = random_state

    def _configuration(self) -> PromptConfiguration:
        if self.configuration is None:
            zeros = (0,) * self.depth
            return PromptConfiguration(text=zeros, image=zeros, space=(0,))
        if isinstance(self.configuration, PromptConfiguration):
            return self.configuration
        return PromptConfiguration.from_json(dict(self.configuration))

    def fit(self, X, y):
        model, task = self._build(X, y, require_even_shots=False)
        cfg = TrainConfig(
            epochs=self.epochs, batch_size=self.batch_size, lr=self.lr,
            distill_weight=self.distill_weight, seed=self.random_state,
        )
        self.prompts_, self.history_ = train_subprompt(model, task, self._configuration(), cfg)
        self._model = model
        self._text = task.text_tokens
        self.classes_ = np.arange(task.num_labels)
        self.n_features_in_ = int(np.prod(X.shape[1:])) if np.asarray(X).ndim > 1 else X.shape[1]
        return self

    def predict_proba(self, X) -> np.ndarray:
        if not hasattr(self, "prompts_"):
            raise ContractError("fit the classifier before predicting")
        n_patches = self._model.image_cfg.base_seq_len - 1
        X = check_image_array(X, n_patches, self._model.image_cfg.hidden_dim)
        from .autodiff import no_grad

        with no_grad():
            probs = predict_probs(self._model, self._text, X, self.prompts_)
        return probs.data

    def predict(self, X) -> np.ndarray:
        return self.predict_proba(X).argmax(axis=1)

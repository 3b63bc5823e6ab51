"""Class prototypes, priors, similarity scores, and prompt mixing.

The per-sample mixed prompt is a convex combination of class prompt
columns.  The combination weights come from a temperature-scaled softmax
over cosine similarities between the sample's incoming cls token and the
global per-class prototypes, with each class reweighted by the client's
empirical class prior.  Prototypes are aggregated server-side with a
momentum rule and can be privatized with per-class Laplace noise.
"""

from dataclasses import dataclass, field

import numpy as np

from . import tensor as te
from .errors import ConfigError, DataError


def compute_class_priors(labels, num_classes: int) -> np.ndarray:
    """Empirical label frequencies delta_c = n_c / N."""
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size == 0:
        raise DataError("cannot compute class priors from an empty label list")
    if labels.min() < 0 or labels.max() >= num_classes:
        raise DataError("label outside [0, num_classes)")
    counts = np.bincount(labels, minlength=num_classes)
    return counts / labels.size


def cosine_similarity(a: np.ndarray, b: np.ndarray) -> float:
    """Cosine similarity, defined as 0 whenever either vector is zero."""
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(a @ b) / (na * nb)


def soft_scores(cls_vec, prototypes, priors, tau: float) -> np.ndarray:
    """Per-class mixing weights for one sample at one layer.

    Computed in log space: logit_c = sim(cls, mu_c)/tau + ln(prior_c),
    followed by a max-subtracted softmax.  Classes with zero prior get an
    exact zero; a zero prototype (class never observed) contributes a
    neutral similarity of 0.
    """
    if tau <= 0:
        raise ConfigError(f"temperature must be positive, got {tau}")
    cls_vec = np.asarray(cls_vec, dtype=np.float64).reshape(-1)
    prototypes = np.asarray(prototypes, dtype=np.float64)
    priors = np.asarray(priors, dtype=np.float64).reshape(-1)
    if prototypes.shape != (priors.size, cls_vec.size):
        raise ConfigError("prototype matrix must be (classes, dim)")
    active = priors > 0.0
    if not active.any():
        raise DataError("all class priors are zero; scores cannot be normalized")
    scores = np.zeros_like(priors)
    logits = _score_logits(cls_vec, prototypes[active], priors[active], tau)
    e = np.exp(logits - logits.max())
    scores[active] = e / e.sum()
    return scores


def _score_logits(cls_vec, protos, priors, tau):
    norms = np.linalg.norm(protos, axis=1)
    cls_norm = np.linalg.norm(cls_vec)
    sims = np.zeros(protos.shape[0])
    nz = norms > 0.0
    if cls_norm > 0.0 and nz.any():
        sims[nz] = (protos[nz] @ cls_vec) / (norms[nz] * cls_norm)
    return sims / tau + np.log(priors)


def soft_scores_op(cls_col: te.Tensor, prototypes, priors, tau: float,
                   detach: bool = False) -> te.Tensor:
    """Differentiable score computation for the forward pass.

    Gradients flow into the cls token (and from there into anything that
    produced it); prototypes and priors are constants.  With `detach` the
    forward value is identical but no gradient propagates through the
    scores (ablation knob).
    """
    cls_vec = cls_col.data.reshape(-1)
    scores = soft_scores(cls_vec, prototypes, priors, tau)
    requires = cls_col.requires_grad and not detach
    out = te.Tensor(scores.reshape(-1, 1), requires_grad=requires)
    if not requires:
        return out

    prototypes = np.asarray(prototypes, dtype=np.float64)
    priors = np.asarray(priors, dtype=np.float64).reshape(-1)
    active = priors > 0.0

    def backward():
        g = out.grad.reshape(-1)[active]
        s = scores[active]
        dlogit = s * (g - float(g @ s))
        protos = prototypes[active]
        norms = np.linalg.norm(protos, axis=1)
        cls_norm = np.linalg.norm(cls_vec)
        grad_cls = np.zeros_like(cls_vec)
        if cls_norm > 0.0:
            nz = norms > 0.0
            if nz.any():
                sims = (protos[nz] @ cls_vec) / (norms[nz] * cls_norm)
                # d sim_c / d cls = mu_c/(|cls||mu_c|) - sim_c * cls/|cls|^2
                coeff = dlogit[nz] / tau
                grad_cls += (coeff / norms[nz]) @ protos / cls_norm
                grad_cls -= float(coeff @ sims) * cls_vec / cls_norm**2
        cls_col.grad += grad_cls.reshape(cls_col.data.shape)

    te.record(out, backward)
    return out


def mix_prompt(class_prompts: np.ndarray, scores: np.ndarray) -> np.ndarray:
    """Convex combination of class prompt columns: m = P @ s."""
    class_prompts = np.asarray(class_prompts, dtype=np.float64)
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    if class_prompts.shape[1] != scores.size:
        raise ValueError("class prompt count must match score length")
    return class_prompts @ scores


def local_prototypes(images, labels, num_classes: int, layers, forward_fn):
    """Per-layer per-class means of incoming cls tokens on one shard.

    `forward_fn(image)` must return a trace exposing `cls_input(layer)`.
    Returns (prototypes, sensitivities, counts) where prototypes maps
    layer -> (classes, dim), the zero vector marking absent classes, and
    sensitivities maps layer -> (classes,) Laplace sensitivities
    S_c = 2 * max_i ||cls_i - mu_c||_1 / n_c (zero for absent classes).
    """
    labels = np.asarray(labels, dtype=np.int64)
    if len(images) == 0:
        raise DataError("client dataset is empty")
    per_layer = {l: [] for l in layers}
    for image in images:
        trace = forward_fn(image)
        for l in layers:
            per_layer[l].append(trace.cls_input(l))
    counts = np.bincount(labels, minlength=num_classes)
    protos = {}
    sens = {}
    for l in layers:
        tokens = np.stack(per_layer[l]) if per_layer[l] else None
        dim = tokens.shape[1]
        mu = np.zeros((num_classes, dim))
        s = np.zeros(num_classes)
        for c in range(num_classes):
            if counts[c] == 0:
                continue
            cls_c = tokens[labels == c]
            mu[c] = cls_c.mean(axis=0)
            s[c] = laplace_sensitivity(cls_c, mu[c])
        protos[l] = mu
        sens[l] = s
    return protos, sens, counts


def aggregate_submissions(submissions) -> tuple[np.ndarray, np.ndarray]:
    """Mean over nonzero per-class submissions; D counts the contributors.

    Classes with no nonzero submission in the buffer aggregate to the
    zero vector with D_c = 0.
    """
    stack = np.stack([np.asarray(s, dtype=np.float64) for s in submissions])
    nonzero = np.any(stack != 0.0, axis=2)
    counts = nonzero.sum(axis=0)
    total = (stack * nonzero[:, :, None]).sum(axis=0)
    agg = np.zeros_like(total)
    mask = counts > 0
    agg[mask] = total[mask] / counts[mask, None]
    return agg, counts


def momentum_update(previous: np.ndarray, aggregate: np.ndarray,
                    contributor_counts: np.ndarray, rho: float) -> np.ndarray:
    """rho * previous + (1 - rho) * aggregate, except classes with no
    contributors keep their previous prototype exactly (rho forced to 1)."""
    if not 0.0 <= rho <= 1.0:
        raise ConfigError(f"momentum must lie in [0, 1], got {rho}")
    previous = np.asarray(previous, dtype=np.float64)
    aggregate = np.asarray(aggregate, dtype=np.float64)
    if previous.shape != aggregate.shape:
        raise ValueError("prototype shapes differ")
    updated = rho * previous + (1.0 - rho) * aggregate
    stale = np.asarray(contributor_counts) == 0
    updated[stale] = previous[stale]
    return updated


def laplace_sensitivity(tokens: np.ndarray, prototype: np.ndarray) -> float:
    """S = 2 * max_i ||token_i - prototype||_1 / n."""
    tokens = np.atleast_2d(np.asarray(tokens, dtype=np.float64))
    n = tokens.shape[0]
    if n == 0:
        raise DataError("sensitivity requires at least one token")
    deviations = np.abs(tokens - prototype).sum(axis=1)
    return 2.0 * float(deviations.max()) / n


def add_laplace_noise(prototype: np.ndarray, sensitivity: float, epsilon: float,
                      rng: np.random.Generator) -> np.ndarray:
    """Add per-coordinate Laplace(0, S/epsilon) noise to one prototype."""
    if epsilon <= 0:
        raise ConfigError(f"privacy budget epsilon must be positive, got {epsilon}")
    prototype = np.asarray(prototype, dtype=np.float64)
    return prototype + rng.laplace(0.0, sensitivity / epsilon, size=prototype.shape)


@dataclass
class PrototypeBank:
    """Global per-layer, per-class cls-token prototypes with momentum state.

    Client submissions are buffered over the current update period and
    folded in by `apply_period_update`; the zero vector is the reserved
    sentinel for classes never observed.
    """

    layers: tuple
    num_classes: int
    dim: int
    rho: float = 0.9
    update_period: int = 1
    mu: dict = field(default_factory=dict)
    _buffer: list = field(default_factory=list)
    _sens_buffer: list = field(default_factory=list)

    def __post_init__(self):
        if not 0.0 <= self.rho <= 1.0:
            raise ConfigError(f"momentum must lie in [0, 1], got {self.rho}")
        if self.update_period < 1:
            raise ConfigError("update period must be >= 1")
        for l in self.layers:
            self.mu.setdefault(l, np.zeros((self.num_classes, self.dim)))

    def warm_start(self, submissions_per_client) -> None:
        """Initialize each prototype as the plain mean over the warm-up
        clients, zero submissions included."""
        if not submissions_per_client:
            raise ConfigError("warm-up requires at least one client")
        for l in self.layers:
            stack = np.stack([sub[l] for sub in submissions_per_client])
            self.mu[l] = stack.mean(axis=0)

    def submit(self, protos: dict, sens: dict) -> None:
        self._buffer.append({l: np.asarray(protos[l]) for l in self.layers})
        self._sens_buffer.append({l: np.asarray(sens[l]) for l in self.layers})

    def pending(self) -> int:
        return len(self._buffer)

    def apply_period_update(self, epsilon=None, rng=None) -> None:
        """Aggregate the buffered submissions, fold them in with momentum,
        optionally add class-level Laplace noise, then clear the buffer.

        Noise uses the largest sensitivity submitted for the class during
        the period and is applied only to classes that received updates.
        """
        if not self._buffer:
            return
        for l in self.layers:
            agg, counts = aggregate_submissions([sub[l] for sub in self._buffer])
            self.mu[l] = momentum_update(self.mu[l], agg, counts, self.rho)
            if epsilon is not None:
                self._privatize_layer(l, counts, epsilon, rng)
        self._buffer.clear()
        self._sens_buffer.clear()

    def _privatize_layer(self, layer, counts, epsilon, rng):
        sens = np.stack([sub[layer] for sub in self._sens_buffer])
        updated = np.flatnonzero(counts > 0)
        for c in updated:
            self.mu[layer][c] = add_laplace_noise(
                self.mu[layer][c], float(sens[:, c].max()), epsilon, rng
            )

    def copy(self) -> "PrototypeBank":
        bank = PrototypeBank(
            layers=self.layers, num_classes=self.num_classes, dim=self.dim,
            rho=self.rho, update_period=self.update_period,
            mu={l: self.mu[l].copy() for l in self.layers},
        )
        return bank

    def export_rows(self):
        """Yield (layer, class, dim, value) rows for CSV export."""
        for l in self.layers:
            for c in range(self.num_classes):
                for d in range(self.dim):
                    yield l, c, d, self.mu[l][c, d]

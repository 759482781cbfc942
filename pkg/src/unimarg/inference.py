"""Queries against a trained network: direct marginals, the sequential guide,
and self-normalised importance sampling."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateWeightsError, NumericError, ValidationError
from .masking import encode_batch, set_observed
from .neural import UmModel, forward, forward_site
from .program import Evidence, ProgramSpec, check_evidence, sample_prior, sample_site, site_log_prob, site_log_probs

DEFAULT_CHUNK = 1 << 16


@dataclass
class MarginalSet:
    """Per unobserved site: a probability vector (categorical) or a mean (continuous)."""

    program: ProgramSpec
    values: dict

    def __getitem__(self, key):
        if isinstance(key, str):
            key = self.program.index(key)
        return self.values[key]

    def __len__(self):
        return len(self.values)

    def __contains__(self, key):
        if isinstance(key, str):
            key = self.program.index(key)
        return key in self.values

    def to_dict(self) -> dict:
        out = {}
        for i, v in self.values.items():
            name = self.program.sites[i].name
            out[name] = np.asarray(v).tolist() if np.ndim(v) else float(v)
        return out


@dataclass(frozen=True)
class GuideConfig:
    sigma_factor: float = 0.5
    floor: float = 1e-3

    def __post_init__(self):
        if not self.sigma_factor > 0:
            raise ValidationError("sigma factor must be > 0")
        if not 0.0 <= self.floor <= 0.1:
            raise ValidationError("categorical floor must be in [0, 0.1]")


@dataclass
class WeightedSampleSet:
    program: ProgramSpec
    evidence: Evidence
    values: np.ndarray  # (n, N)
    log_weights: np.ndarray
    proposal: str

    @property
    def n(self) -> int:
        return len(self.log_weights)

    def normalised_weights(self) -> np.ndarray:
        return _normalise(self.log_weights)


def _normalise(log_weights: np.ndarray) -> np.ndarray:
    top = np.max(log_weights)
    if not np.isfinite(top):
        raise DegenerateWeightsError("all importance weights are zero")
    w = np.exp(log_weights - top)
    return w / w.sum()


def _check_model_evidence(model: UmModel, evidence: Evidence):
    check_evidence(model.program, evidence)


def cond_marginals(model: UmModel, evidence: Evidence) -> MarginalSet:
    """One encode and one forward pass; continuous means are de-standardised."""
    _check_model_evidence(model, evidence)
    n = model.program.n_sites
    values = np.zeros((1, n))
    observed = np.zeros((1, n), dtype=bool)
    for i, v in evidence.values.items():
        values[0, i] = v
        observed[0, i] = True
    x = encode_batch(model.layout, model.stats, values, observed)
    hidden = [i for i in range(n) if i not in evidence.values]
    if not hidden:
        return MarginalSet(model.program, {})
    out = forward(model, x)[0]
    result = {}
    for i in hidden:
        sl = model.layout.out_slices[i]
        if model.layout.categorical[i]:
            result[i] = out[sl].copy()
        else:
            result[i] = float(out[sl.start] * model.stats.std[i] + model.stats.mean[i])
    return MarginalSet(model.program, result)


# -- proposals -----------------------------------------------------------------------


class PriorProposal:
    """Likelihood weighting: ancestral sampling with observed sites clamped."""

    tag = "prior"

    def propose(self, program: ProgramSpec, evidence: Evidence, n: int, rng: np.random.Generator):
        values = sample_prior(program, n, rng, clamp=evidence)
        hidden = [i for i in range(program.n_sites) if i not in evidence.values]
        logq = np.zeros(n)
        for i in hidden:
            logq += site_log_prob(program, i, values)
        return values, logq


class UmGuide:
    """Site-by-site proposal built from network predictions.

    Sites are visited in program order; every site sampled so far is fed back
    to the network as observed before predicting the next one.
    """

    tag = "um-guide"

    def __init__(self, model: UmModel, config: GuideConfig | None = None):
        self.model = model
        self.config = config or GuideConfig()

    def site_proposal(self, x: np.ndarray, site: int):
        """Proposal parameters for ``site`` given encoded inputs: probabilities or (mean, std)."""
        model, cfg = self.model, self.config
        pred = forward_site(model, x, site)
        if not np.all(np.isfinite(pred)):
            raise NumericError(f"non-finite prediction for site {model.program.sites[site].name!r}")
        if model.layout.categorical[site]:
            k = pred.shape[1]
            return (1.0 - cfg.floor) * pred + cfg.floor / k
        mean = pred * model.stats.std[site] + model.stats.mean[site]
        return mean, cfg.sigma_factor * model.stats.std[site]

    def propose(self, program: ProgramSpec, evidence: Evidence, n: int, rng: np.random.Generator):
        model = self.model
        check_evidence(program, evidence)
        N = program.n_sites
        values = np.zeros((n, N))
        observed = np.zeros((n, N), dtype=bool)
        for i, v in evidence.values.items():
            values[:, i] = v
            observed[:, i] = True
        x = encode_batch(model.layout, model.stats, values, observed)
        logq = np.zeros(n)
        for i, site in enumerate(program.sites):
            if i in evidence.values:
                continue
            if not site.proposable:
                values[:, i] = sample_site(program, i, values, rng)
                logq += site_log_prob(program, i, values)
            elif site.is_categorical:
                q = self.site_proposal(x, i)
                u = rng.random(n)
                draw = np.minimum((u[:, None] >= np.cumsum(q, axis=1)).sum(axis=1), site.arity - 1)
                values[:, i] = draw
                logq += np.log(q[np.arange(n), draw])
            else:
                mean, std = self.site_proposal(x, i)
                z = rng.standard_normal(n)
                values[:, i] = mean + std * z
                logq += -0.5 * z * z - np.log(std) - 0.5 * np.log(2.0 * np.pi)
            set_observed(model.layout, model.stats, x, i, values[:, i], site.is_categorical)
        return values, logq


def sequential_propose(model: UmModel, program: ProgramSpec, evidence: Evidence, guide_cfg: GuideConfig, rng):
    """Single guided proposal: ``(assignment, log q)``."""
    values, logq = UmGuide(model, guide_cfg).propose(program, evidence, 1, rng)
    return values[0], float(logq[0])


def _as_proposal(proposal):
    if proposal is None or proposal == "prior":
        return PriorProposal()
    if isinstance(proposal, tuple):
        return UmGuide(*proposal)
    if isinstance(proposal, UmModel):
        return UmGuide(proposal)
    if hasattr(proposal, "propose"):
        return proposal
    raise ValidationError(f"unsupported proposal {proposal!r}")


def _weighted_chunks(program, evidence, proposal, n, rng, chunk):
    check_evidence(program, evidence)
    if n < 1:
        raise ValidationError("need at least one sample")
    for lo in range(0, n, chunk):
        m = min(chunk, n - lo)
        values, logq = proposal.propose(program, evidence, m, rng)
        if isinstance(proposal, PriorProposal):
            # hidden-site terms cancel exactly; only the observed likelihood remains
            logw = np.zeros(m)
            for i in evidence.values:
                logw += site_log_prob(program, i, values)
        else:
            with np.errstate(invalid="ignore"):
                logw = site_log_probs(program, values).sum(axis=1) - logq
        logw = np.where(np.isnan(logw), -np.inf, logw)
        yield values, logw


def importance_sample(
    program: ProgramSpec,
    evidence: Evidence,
    proposal="prior",
    n: int = 10_000,
    rng: np.random.Generator | None = None,
    chunk: int = DEFAULT_CHUNK,
) -> WeightedSampleSet:
    """Draw ``n`` weighted samples; ``log w = log p(x, y) - log q(x)``.

    ``proposal`` is ``"prior"``, a trained model, a ``(model, GuideConfig)``
    pair, or any object with a ``propose(program, evidence, n, rng)`` method.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    prop = _as_proposal(proposal)
    parts = list(_weighted_chunks(program, evidence, prop, n, rng, chunk))
    values = np.concatenate([p[0] for p in parts])
    logw = np.concatenate([p[1] for p in parts])
    if not np.isfinite(logw.max()):
        raise DegenerateWeightsError("all importance weights are zero; evidence unreachable under the proposal")
    return WeightedSampleSet(program, evidence, values, logw, prop.tag)


def _estimates_from(program, evidence, values, w) -> dict:
    out = {}
    for i, site in enumerate(program.sites):
        if i in evidence.values:
            continue
        if site.is_categorical:
            out[i] = np.bincount(values[:, i].astype(np.intp), weights=w, minlength=site.arity)
        else:
            live = w > 0
            out[i] = float(np.dot(w[live], values[live, i]))
    return out


def posterior_estimates(samples: WeightedSampleSet) -> MarginalSet:
    w = samples.normalised_weights()
    est = _estimates_from(samples.program, samples.evidence, samples.values, w)
    for i, v in est.items():
        if np.ndim(v):
            est[i] = v / v.sum()
    return MarginalSet(samples.program, est)


def effective_sample_size(samples) -> float:
    """``(sum w)^2 / sum w^2``; accepts a sample set or raw log-weights."""
    logw = samples.log_weights if isinstance(samples, WeightedSampleSet) else np.asarray(samples, dtype=float)
    top = np.max(logw)
    if not np.isfinite(top):
        raise DegenerateWeightsError("all importance weights are zero")
    w = np.exp(logw - top)
    return float(w.sum() ** 2 / np.dot(w, w))


def estimate_posterior(
    program: ProgramSpec,
    evidence: Evidence,
    proposal="prior",
    n: int = 1_000_000,
    rng: np.random.Generator | None = None,
    chunk: int = DEFAULT_CHUNK,
) -> tuple[MarginalSet, float]:
    """Streaming equivalent of ``posterior_estimates(importance_sample(...))`` plus ESS.

    Consumes the same random draws as :func:`importance_sample` but keeps only
    running sums, so a million samples of a large program fit in memory.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    prop = _as_proposal(proposal)
    shift = -np.inf
    sum_w = sum_w2 = 0.0
    acc: dict = {}
    for values, logw in _weighted_chunks(program, evidence, prop, n, rng, chunk):
        top = logw.max()
        if not np.isfinite(top):
            continue
        if top > shift:
            scale = np.exp(shift - top) if np.isfinite(shift) else 0.0
            sum_w *= scale
            sum_w2 *= scale * scale
            for i in acc:
                acc[i] = acc[i] * scale
            shift = top
        w = np.exp(logw - shift)
        sum_w += w.sum()
        sum_w2 += np.dot(w, w)
        for i, v in _estimates_from(program, evidence, values, w).items():
            acc[i] = acc.get(i, 0.0) + v
    if not np.isfinite(shift):
        raise DegenerateWeightsError("all importance weights are zero; evidence unreachable under the proposal")
    est = {}
    for i, v in acc.items():
        est[i] = v / v.sum() if np.ndim(v) else float(v / sum_w)
    return MarginalSet(program, est), float(sum_w**2 / sum_w2)

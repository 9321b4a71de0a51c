"""Small differentiable sequence policy over full interaction histories.

The encoder pools the entire episode prefix into one vector: every item
(widget value, step index, action echo, emitted token) is embedded, bound to
its position by an elementwise multiply with a fixed sinusoidal key, and
summed. No truncation window exists, so editing any early item perturbs every
later encoding. A two-hidden-layer tanh MLP maps the pooled vector to
separate verb and argument softmax heads; an action is exactly two tokens.

Gradients are hand-rolled (`backward` computes the exact gradient of a
weighted token log-likelihood) and everything runs in float64 so finite
difference checks have headroom. Sampling stores two log-probabilities per
token: the tempered value actually used to draw the token, and the
temperature-1.0 value used later as the importance-ratio reference.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from functools import lru_cache

import numpy as np

from .environment import (
    Action,
    Observation,
    ParseFailure,
    RewardBreakdown,
    VERB_VOCAB_SIZE,
    action_from_dict,
    arg_vocab_size,
)
from .errors import ConfigError, DataError, UsageError

_INIT_SEED_TAG = 0x9D0C1E5


@dataclass(frozen=True)
class TokenStep:
    """One sampled (verb, argument) pair with its behavior log-probs.

    *_logprob_sample carry the tempered distribution the token was drawn
    from; *_logprob_ref carry the temperature-1.0 values that importance
    ratios are computed against.
    """

    verb_token: int
    arg_token: int
    verb_logprob_sample: float
    arg_logprob_sample: float
    verb_logprob_ref: float
    arg_logprob_ref: float

    @property
    def logprob_behavior(self) -> float:
        return self.verb_logprob_sample + self.arg_logprob_sample

    def to_dict(self) -> dict:
        return {
            "verb_token": self.verb_token,
            "arg_token": self.arg_token,
            "verb_logprob_sample": self.verb_logprob_sample,
            "arg_logprob_sample": self.arg_logprob_sample,
            "verb_logprob_ref": self.verb_logprob_ref,
            "arg_logprob_ref": self.arg_logprob_ref,
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "TokenStep":
        return cls(
            verb_token=int(obj["verb_token"]),
            arg_token=int(obj["arg_token"]),
            verb_logprob_sample=float(obj["verb_logprob_sample"]),
            arg_logprob_sample=float(obj["arg_logprob_sample"]),
            verb_logprob_ref=float(obj["verb_logprob_ref"]),
            arg_logprob_ref=float(obj["arg_logprob_ref"]),
        )


@dataclass(frozen=True)
class TrajectoryStep:
    observation: Observation
    token: TokenStep
    action: Action | ParseFailure

    def to_dict(self) -> dict:
        return {
            "observation": self.observation.to_dict(),
            "token": self.token.to_dict(),
            "action": self.action.to_dict(),
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "TrajectoryStep":
        return cls(
            observation=Observation.from_dict(obj["observation"]),
            token=TokenStep.from_dict(obj["token"]),
            action=action_from_dict(obj["action"]),
        )


ORIGIN_FRESH = "fresh"
ORIGIN_REPLAYED = "replayed"


@dataclass(frozen=True)
class Trajectory:
    task_id: int
    steps: tuple[TrajectoryStep, ...]
    reward: RewardBreakdown
    termination_cause: str
    origin: str = ORIGIN_FRESH
    behavior_version: int = 0

    @property
    def token_count(self) -> int:
        return 2 * len(self.steps)

    def ref_logprobs(self) -> np.ndarray:
        """Stored temperature-1.0 behavior log-probs, interleaved
        [verb_0, arg_0, verb_1, arg_1, ...]."""
        out = np.empty(self.token_count, dtype=np.float64)
        for i, step in enumerate(self.steps):
            out[2 * i] = step.token.verb_logprob_ref
            out[2 * i + 1] = step.token.arg_logprob_ref
        return out

    def sample_logprobs(self) -> np.ndarray:
        out = np.empty(self.token_count, dtype=np.float64)
        for i, step in enumerate(self.steps):
            out[2 * i] = step.token.verb_logprob_sample
            out[2 * i + 1] = step.token.arg_logprob_sample
        return out

    def to_dict(self) -> dict:
        return {
            "task_id": self.task_id,
            "steps": [s.to_dict() for s in self.steps],
            "reward": self.reward.to_dict(),
            "termination_cause": self.termination_cause,
            "origin": self.origin,
            "behavior_version": self.behavior_version,
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "Trajectory":
        try:
            return cls(
                task_id=int(obj["task_id"]),
                steps=tuple(TrajectoryStep.from_dict(s) for s in obj["steps"]),
                reward=RewardBreakdown.from_dict(obj["reward"]),
                termination_cause=str(obj["termination_cause"]),
                origin=str(obj["origin"]),
                behavior_version=int(obj["behavior_version"]),
            )
        except (KeyError, ValueError, TypeError) as exc:
            raise DataError(f"malformed trajectory record: {exc}") from exc


# Names of every learnable array, in a fixed order shared by the optimizer,
# checkpoints and the flatten/unflatten helpers.
ARRAY_FIELDS = (
    "verb_emb",
    "arg_emb",
    "widget_emb",
    "step_emb",
    "init_emb",
    "w1",
    "b1",
    "w2",
    "b2",
    "w_verb",
    "b_verb",
    "w_arg",
    "b_arg",
)


@dataclass
class PolicyParams:
    """All learnable parameters. Treated as immutable: the optimizer returns
    a fresh instance with parameter_version incremented."""

    verb_emb: np.ndarray   # (V, D)
    arg_emb: np.ndarray    # (A, D)
    widget_emb: np.ndarray  # (W, WIDGET_VALUE_MOD, D)
    step_emb: np.ndarray   # (max_steps + 1, D)
    init_emb: np.ndarray   # (D,)
    w1: np.ndarray         # (H1, D)
    b1: np.ndarray
    w2: np.ndarray         # (H2, H1)
    b2: np.ndarray
    w_verb: np.ndarray     # (V, H2)
    b_verb: np.ndarray
    w_arg: np.ndarray      # (A, H2)
    b_arg: np.ndarray
    parameter_version: int = 0

    @property
    def n_widgets(self) -> int:
        return self.widget_emb.shape[0]

    @property
    def max_steps(self) -> int:
        return self.step_emb.shape[0] - 1

    @property
    def embed_dim(self) -> int:
        return self.init_emb.shape[0]

    def arrays(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in ARRAY_FIELDS}

    def copy(self) -> "PolicyParams":
        return replace(self, **{name: getattr(self, name).copy() for name in ARRAY_FIELDS})


def init_params(
    seed: int,
    n_widgets: int,
    max_steps: int = 15,
    embed_dim: int = 24,
    hidden_dim: int = 32,
    quit_verb_prior: float = -3.0,
    finish_verb_prior: float = -0.5,
    uncommon_verb_prior: float = -1.5,
    no_arg_prior: float = -0.5,
) -> PolicyParams:
    """Random initialization with a mild behavioral prior.

    The head biases mimic a competent GUI agent's marginal action statistics:
    clicks dominate, scroll/type/hotkey are uncommon, FINISH fires now and
    then, and the bail-out verbs (WAIT, FAIL, CALL_USER) along with the
    no-argument token start well below everything else. Without the prior a
    fresh policy fumbles the schema so often that quitting on the first step
    strictly dominates exploring (zero total beats accumulating format
    penalties), no task success is ever sampled, and group-relative training
    has nothing to learn from. All priors are ordinary learnable biases.
    """
    if n_widgets < 1 or max_steps < 1 or embed_dim < 2 or hidden_dim < 2:
        raise ConfigError("invalid policy dimensions")
    from .environment import ActionKind, META_KINDS, VERB_TOKEN, WIDGET_VALUE_MOD, no_arg_token

    rng = np.random.default_rng(np.random.SeedSequence((_INIT_SEED_TAG, seed)))
    d, h = embed_dim, hidden_dim
    v, a = VERB_VOCAB_SIZE, arg_vocab_size(n_widgets)

    def table(*shape):
        return 0.2 * rng.standard_normal(shape)

    b_verb = np.zeros(v)
    for kind in META_KINDS:
        b_verb[VERB_TOKEN[kind]] = quit_verb_prior
    for kind in (ActionKind.SCROLL, ActionKind.TYPE_TEXT, ActionKind.HOTKEY):
        b_verb[VERB_TOKEN[kind]] = uncommon_verb_prior
    b_verb[VERB_TOKEN[ActionKind.FINISH]] = finish_verb_prior
    b_arg = np.zeros(a)
    b_arg[no_arg_token(n_widgets)] = no_arg_prior

    return PolicyParams(
        verb_emb=table(v, d),
        arg_emb=table(a, d),
        widget_emb=table(n_widgets, WIDGET_VALUE_MOD, d),
        step_emb=table(max_steps + 1, d),
        init_emb=table(d),
        w1=rng.standard_normal((h, d)) / np.sqrt(d),
        b1=np.zeros(h),
        w2=rng.standard_normal((h, h)) / np.sqrt(h),
        b2=np.zeros(h),
        w_verb=0.3 * rng.standard_normal((v, h)) / np.sqrt(h),
        b_verb=b_verb,
        w_arg=0.3 * rng.standard_normal((a, h)) / np.sqrt(h),
        b_arg=b_arg,
        parameter_version=0,
    )


def zero_grads(params: PolicyParams) -> dict[str, np.ndarray]:
    return {name: np.zeros_like(arr) for name, arr in params.arrays().items()}


def flatten_arrays(arrays: dict[str, np.ndarray]) -> np.ndarray:
    return np.concatenate([arrays[name].ravel() for name in ARRAY_FIELDS])


def unflatten_like(vector: np.ndarray, params: PolicyParams) -> dict[str, np.ndarray]:
    out = {}
    offset = 0
    for name, arr in params.arrays().items():
        size = arr.size
        out[name] = vector[offset : offset + size].reshape(arr.shape).copy()
        offset += size
    return out


@lru_cache(maxsize=8)
def _position_keys(n_positions: int, dim: int) -> np.ndarray:
    """Fixed sinusoidal binding keys; position u, channel d pairs a geometric
    frequency ladder with alternating sin/cos so content-position products
    stay distinguishable."""
    u = np.arange(1, n_positions + 1, dtype=np.float64)[:, None]
    d = np.arange(dim, dtype=np.float64)[None, :]
    freq = 50.0 ** (-(2.0 * np.floor(d / 2.0)) / dim)
    angle = u * freq
    keys = np.where(d.astype(int) % 2 == 0, np.sin(angle), np.cos(angle))
    keys.setflags(write=False)
    return keys


class IncrementalEncoder:
    """Pools a growing episode prefix in canonical item order.

    Canonical order per step u: widget values, step-index embedding (key 3u),
    echo tokens if present (key 3u+1), then the emitted token pair
    (key 3u+2). The full-recompute path in `encode_history` walks the same
    order, so the two agree bitwise.
    """

    def __init__(self, params: PolicyParams):
        self.params = params
        # +2 slack: the step-cap observation can sit one past max_steps.
        self.keys = _position_keys(3 * (params.max_steps + 2), params.embed_dim)
        self.acc = params.init_emb.copy()
        self.n_obs = 0
        self.n_tok = 0

    def push_observation(self, obs: Observation) -> None:
        if self.n_obs != self.n_tok:
            raise UsageError("observation pushed out of turn")
        p = self.params
        key = self.keys[3 * self.n_obs]
        for w, value in enumerate(obs.widget_states):
            self.acc += p.widget_emb[w, value] * key
        self.acc += p.step_emb[min(obs.step_index, p.max_steps)] * key
        if obs.last_action_echo is not None:
            echo_key = self.keys[3 * self.n_obs + 1]
            verb, arg = obs.last_action_echo
            self.acc += p.verb_emb[verb] * echo_key
            self.acc += p.arg_emb[arg] * echo_key
        self.n_obs += 1

    def push_tokens(self, verb_token: int, arg_token: int) -> None:
        if self.n_obs != self.n_tok + 1:
            raise UsageError("tokens pushed out of turn")
        key = self.keys[3 * self.n_tok + 2]
        self.acc += self.params.verb_emb[verb_token] * key
        self.acc += self.params.arg_emb[arg_token] * key
        self.n_tok += 1

    def encoding(self) -> np.ndarray:
        return self.acc.copy()


def encode_history(
    params: PolicyParams,
    observations: list[Observation],
    token_pairs: list[tuple[int, int]],
) -> np.ndarray:
    """Pooled encoding of an episode prefix (full recompute).

    An empty prefix encodes to the learned initial-state sentinel. The token
    list may be one shorter than the observation list (the usual
    about-to-act state) or equal in length (a closed prefix).
    """
    if len(token_pairs) not in (len(observations), len(observations) - 1) and observations:
        if len(token_pairs) > len(observations):
            raise UsageError("more token pairs than observations")
    enc = IncrementalEncoder(params)
    for u, obs in enumerate(observations):
        enc.push_observation(obs)
        if u < len(token_pairs):
            enc.push_tokens(*token_pairs[u])
    return enc.encoding()


def _forward(params: PolicyParams, enc: np.ndarray):
    h1 = np.tanh(params.w1 @ enc + params.b1)
    h2 = np.tanh(params.w2 @ h1 + params.b2)
    verb_logits = params.w_verb @ h2 + params.b_verb
    arg_logits = params.w_arg @ h2 + params.b_arg
    return h1, h2, verb_logits, arg_logits


def _log_softmax(logits: np.ndarray, temperature: float) -> np.ndarray:
    z = logits / temperature
    z = z - z.max()
    return z - np.log(np.exp(z).sum())


def action_distribution(
    params: PolicyParams, hidden_state: np.ndarray, temperature: float
) -> tuple[np.ndarray, np.ndarray]:
    """Tempered (verb, argument) probability vectors for a pooled encoding."""
    if temperature <= 0:
        raise ConfigError(f"temperature must be > 0, got {temperature}")
    _, _, verb_logits, arg_logits = _forward(params, hidden_state)
    return (
        np.exp(_log_softmax(verb_logits, temperature)),
        np.exp(_log_softmax(arg_logits, temperature)),
    )


def _draw(logprobs: np.ndarray, rng: np.random.Generator) -> int:
    cdf = np.cumsum(np.exp(logprobs))
    idx = int(np.searchsorted(cdf, rng.random(), side="right"))
    return min(idx, len(logprobs) - 1)


def sample_step(
    params: PolicyParams,
    hidden_state: np.ndarray,
    temperature: float,
    rng: np.random.Generator,
) -> TokenStep:
    """Draw one (verb, argument) pair from the tempered heads, recording both
    the tempered and the temperature-1.0 log-probs of the drawn tokens."""
    if temperature <= 0:
        raise ConfigError(f"temperature must be > 0, got {temperature}")
    _, _, verb_logits, arg_logits = _forward(params, hidden_state)
    verb_lp_t = _log_softmax(verb_logits, temperature)
    arg_lp_t = _log_softmax(arg_logits, temperature)
    verb_lp_1 = _log_softmax(verb_logits, 1.0)
    arg_lp_1 = _log_softmax(arg_logits, 1.0)
    v = _draw(verb_lp_t, rng)
    a = _draw(arg_lp_t, rng)
    return TokenStep(
        verb_token=v,
        arg_token=a,
        verb_logprob_sample=float(verb_lp_t[v]),
        arg_logprob_sample=float(arg_lp_t[a]),
        verb_logprob_ref=float(verb_lp_1[v]),
        arg_logprob_ref=float(arg_lp_1[a]),
    )


def trajectory_logprobs(
    params: PolicyParams, trajectory: Trajectory, temperature: float
) -> np.ndarray:
    """Teacher-forced per-token log-probs over the recorded history,
    interleaved [verb_0, arg_0, verb_1, arg_1, ...]."""
    if temperature <= 0:
        raise ConfigError(f"temperature must be > 0, got {temperature}")
    enc = IncrementalEncoder(params)
    out = np.empty(trajectory.token_count, dtype=np.float64)
    for i, step in enumerate(trajectory.steps):
        enc.push_observation(step.observation)
        _, _, verb_logits, arg_logits = _forward(params, enc.acc)
        out[2 * i] = _log_softmax(verb_logits, temperature)[step.token.verb_token]
        out[2 * i + 1] = _log_softmax(arg_logits, temperature)[step.token.arg_token]
        enc.push_tokens(step.token.verb_token, step.token.arg_token)
    return out


def backward(
    params: PolicyParams,
    trajectory: Trajectory,
    token_weights: np.ndarray,
    temperature: float = 1.0,
) -> dict[str, np.ndarray]:
    """Exact gradient of sum_t weight_t * log pi(token_t | prefix_t) w.r.t.
    every parameter array.

    The pooled encoding is a running sum, so an item pushed at step u
    contributes to every later step's encoding; those contributions are
    gathered with one suffix-sum pass over the per-step encoding gradients.
    """
    n_tokens = trajectory.token_count
    token_weights = np.asarray(token_weights, dtype=np.float64)
    if token_weights.shape != (n_tokens,):
        raise UsageError(
            f"weight vector length {token_weights.shape} does not match token count {n_tokens}"
        )
    grads = zero_grads(params)
    if n_tokens == 0:
        return grads

    enc = IncrementalEncoder(params)
    encs, h1s, h2s, verb_ps, arg_ps = [], [], [], [], []
    for step in trajectory.steps:
        enc.push_observation(step.observation)
        e = enc.encoding()
        h1, h2, verb_logits, arg_logits = _forward(params, e)
        encs.append(e)
        h1s.append(h1)
        h2s.append(h2)
        verb_ps.append(np.exp(_log_softmax(verb_logits, temperature)))
        arg_ps.append(np.exp(_log_softmax(arg_logits, temperature)))
        enc.push_tokens(step.token.verb_token, step.token.arg_token)

    n_steps = len(trajectory.steps)
    d_encs = np.zeros((n_steps, params.embed_dim))
    for u, step in enumerate(trajectory.steps):
        wv, wa = token_weights[2 * u], token_weights[2 * u + 1]
        d_verb = -wv * verb_ps[u] / temperature
        d_verb[step.token.verb_token] += wv / temperature
        d_arg = -wa * arg_ps[u] / temperature
        d_arg[step.token.arg_token] += wa / temperature

        grads["w_verb"] += np.outer(d_verb, h2s[u])
        grads["b_verb"] += d_verb
        grads["w_arg"] += np.outer(d_arg, h2s[u])
        grads["b_arg"] += d_arg

        d_h2 = params.w_verb.T @ d_verb + params.w_arg.T @ d_arg
        d_z2 = d_h2 * (1.0 - h2s[u] ** 2)
        grads["w2"] += np.outer(d_z2, h1s[u])
        grads["b2"] += d_z2

        d_h1 = params.w2.T @ d_z2
        d_z1 = d_h1 * (1.0 - h1s[u] ** 2)
        grads["w1"] += np.outer(d_z1, encs[u])
        grads["b1"] += d_z1
        d_encs[u] = params.w1.T @ d_z1

    # suffix[u] multiplies items visible from step u onward
    suffix = np.zeros((n_steps + 1, params.embed_dim))
    for u in range(n_steps - 1, -1, -1):
        suffix[u] = suffix[u + 1] + d_encs[u]

    keys = _position_keys(3 * (params.max_steps + 2), params.embed_dim)
    grads["init_emb"] += suffix[0]
    for u, step in enumerate(trajectory.steps):
        obs = step.observation
        obs_key = keys[3 * u]
        obs_factor = suffix[u]
        for w, value in enumerate(obs.widget_states):
            grads["widget_emb"][w, value] += obs_factor * obs_key
        grads["step_emb"][min(obs.step_index, params.max_steps)] += obs_factor * obs_key
        if obs.last_action_echo is not None:
            echo_key = keys[3 * u + 1]
            ev, ea = obs.last_action_echo
            grads["verb_emb"][ev] += obs_factor * echo_key
            grads["arg_emb"][ea] += obs_factor * echo_key
        tok_key = keys[3 * u + 2]
        tok_factor = suffix[u + 1]
        grads["verb_emb"][step.token.verb_token] += tok_factor * tok_key
        grads["arg_emb"][step.token.arg_token] += tok_factor * tok_key
    return grads


class NeuralPolicy:
    """Rollout-facing wrapper: immutable parameter snapshot plus the
    incremental-encoder caching protocol used by the rollout engine."""

    def __init__(self, params: PolicyParams):
        self.params = params

    @property
    def version(self) -> int:
        return self.params.parameter_version

    def token_step(self, view, temperature: float, rng: np.random.Generator) -> TokenStep:
        encoder = view.cache.get("encoder")
        if encoder is None or encoder.params is not self.params:
            encoder = IncrementalEncoder(self.params)
            view.cache["encoder"] = encoder
        while True:
            if encoder.n_obs < len(view.observations) and encoder.n_obs == encoder.n_tok:
                encoder.push_observation(view.observations[encoder.n_obs])
            elif encoder.n_tok < len(view.token_pairs) and encoder.n_obs == encoder.n_tok + 1:
                encoder.push_tokens(*view.token_pairs[encoder.n_tok])
            else:
                break
        return sample_step(self.params, encoder.acc, temperature, rng)

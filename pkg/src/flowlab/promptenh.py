"""Discrete prompt-enhancer policy trained with group-relative PPO.

The enhancer composes modifier-token sequences on top of a user prompt. Each
token carries an engineered effect the frozen generator understands (guidance
pull toward an anchor point, initial-noise scaling, or nothing); the policy is
rewarded by outcomes sampled from the frozen generator plus a structure
reward, with an exact categorical KL penalty toward the initialization. The
vocabulary deliberately mixes helpful and harmful tokens so the policy has to
learn selection. Alignment is always measured against the original prompt's
own law, never the modified conditioning.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .checkpointio import Checkpoint
from .diffcore import (
    AdamState,
    ParamStore,
    RngStream,
    Tensor,
    adam_step,
    backward,
    clamp,
    exp,
    grad_norm,
    log_softmax_rows,
    minimum,
    rows,
    sum_rows,
    take_per_row,
    tanh,
    tsum,
)
from .flowsde import NoiseSchedule, ode_step
from .genmodel import FlowNet, Task
from .grpoflow import compute_advantages
from .rewards import RewardWeights, component_matrix

log = logging.getLogger(__name__)

END_TOKEN = "END"


class PromptEnhError(ValueError):
    """Invalid vocabulary, unknown token, or aborted training run."""


@dataclass(frozen=True)
class TokenEffect:
    """Deterministic conditioning adjustment carried by one modifier token.

    pull > 0 steers the reverse integration toward (prompt mean + offset);
    noise_scale rescales the initial noise. A default-constructed effect is
    a no-op.
    """

    pull: float = 0.0
    offset: tuple[float, ...] = ()
    noise_scale: float = 1.0

    def __post_init__(self):
        if self.noise_scale <= 0:
            raise PromptEnhError("noise_scale must be positive")
        if self.pull < 0:
            raise PromptEnhError("pull must be non-negative")


@dataclass(frozen=True)
class ModifierVocab:
    tokens: tuple[str, ...]
    effects: dict[str, TokenEffect]

    def __post_init__(self):
        if self.tokens.count(END_TOKEN) != 1:
            raise PromptEnhError("vocabulary needs exactly one END token")
        if len(set(self.tokens)) != len(self.tokens):
            raise PromptEnhError("duplicate token names")
        missing = [t for t in self.tokens if t != END_TOKEN and t not in self.effects]
        if missing:
            raise PromptEnhError(f"tokens without effects: {missing}")

    @property
    def size(self) -> int:
        return len(self.tokens)

    @property
    def end_index(self) -> int:
        return self.tokens.index(END_TOKEN)

    def index(self, token: str) -> int:
        try:
            return self.tokens.index(token)
        except ValueError:
            raise PromptEnhError(f"unknown token '{token}'") from None

    def effect(self, token: str) -> TokenEffect:
        if token == END_TOKEN:
            return TokenEffect()
        if token not in self.effects:
            raise PromptEnhError(f"unknown token '{token}'")
        return self.effects[token]


def default_vocab(dim: int) -> ModifierVocab:
    """Seven tokens: two helpful, one neutral, three harmful, plus END.

    Helpful tokens carry guidance pulls whose combined strength lands near
    the outcome optimum for one focus plus one tune; stacking more pulls
    drags samples off the learned field and loses reward, so the best
    sequences are short, duplicate-free, and END-terminated.
    """
    far_a = tuple(3.0 if i == 0 else 0.0 for i in range(dim))
    far_b = tuple(-3.0 if i == 1 % dim else 0.0 for i in range(dim))
    effects = {
        "focus": TokenEffect(pull=0.35),
        "tune": TokenEffect(pull=0.2),
        "plain": TokenEffect(),
        "drift_a": TokenEffect(pull=0.35, offset=far_a),
        "drift_b": TokenEffect(pull=0.35, offset=far_b),
        "scatter": TokenEffect(noise_scale=1.8),
    }
    return ModifierVocab(
        tokens=("focus", "tune", "plain", "drift_a", "drift_b", "scatter", END_TOKEN),
        effects=effects,
    )


@dataclass(frozen=True)
class EnhancedPrompt:
    prompt_id: int
    tokens: tuple[str, ...]
    logprob: float
    structure_valid: bool


# ----------------------------------------------------------------- policy


PE_EMB_DIM = 8


class EnhancerPolicy:
    """Per-position categorical policy over the modifier vocabulary.

    Logits at position p for prompt P come from a two-layer perceptron on
    (prompt embedding + position embedding); sampled tokens do not feed back
    into later positions, termination alone is sequential.
    """

    def __init__(
        self,
        num_prompts: int,
        vocab_size: int,
        max_len: int = 4,
        hidden: int = 24,
        stream: RngStream | None = None,
    ):
        if num_prompts < 1 or vocab_size < 2 or max_len < 1:
            raise PromptEnhError("need num_prompts >= 1, vocab_size >= 2, max_len >= 1")
        self.num_prompts = num_prompts
        self.vocab_size = vocab_size
        self.max_len = max_len
        self.hidden = hidden
        self.store = ParamStore()
        stream = stream or RngStream(0, ("enhancer", "init"))

        def init(name, shape, scale):
            self.store.create(name, scale * stream.normal(*shape))

        init("emb.prompt", (num_prompts, PE_EMB_DIM), 0.5)
        init("emb.pos", (max_len, PE_EMB_DIM), 0.5)
        init("l1.w", (PE_EMB_DIM, hidden), 1.0 / np.sqrt(PE_EMB_DIM))
        init("l1.b", (hidden,), 0.0)
        init("out.w", (hidden, vocab_size), 1.0 / np.sqrt(hidden))
        init("out.b", (vocab_size,), 0.0)

    def clone(self) -> "EnhancerPolicy":
        other = EnhancerPolicy(
            self.num_prompts, self.vocab_size, self.max_len, self.hidden,
            RngStream(0, ("enhancer", "clone")),
        )
        other.store.load(self.store.snapshot())
        return other

    def logits_np(self, prompt_id: int) -> np.ndarray:
        s = self.store
        h = s["emb.prompt"].data[prompt_id][None, :] + s["emb.pos"].data
        h = np.tanh(h @ s["l1.w"].data + s["l1.b"].data)
        return h @ s["out.w"].data + s["out.b"].data

    def logits_graph(self, prompt_id: int) -> Tensor:
        s = self.store
        base = rows(s["emb.prompt"], np.full(self.max_len, prompt_id, dtype=int))
        h = tanh((base + s["emb.pos"]) @ s["l1.w"] + s["l1.b"])
        return h @ s["out.w"] + s["out.b"]

    def log_probs_np(self, prompt_id: int) -> np.ndarray:
        """(max_len, K) per-position log-probabilities (row log-softmax)."""
        a = self.logits_np(prompt_id)
        z = a - a.max(axis=1, keepdims=True)
        return z - np.log(np.exp(z).sum(axis=1, keepdims=True))

    def log_probs_graph(self, prompt_id: int) -> Tensor:
        return log_softmax_rows(self.logits_graph(prompt_id))

    def to_checkpoint(self, **metadata: str) -> Checkpoint:
        meta = dict(
            model="enhancer",
            num_prompts=str(self.num_prompts),
            vocab_size=str(self.vocab_size),
            max_len=str(self.max_len),
            hidden=str(self.hidden),
        )
        meta.update({k: str(v) for k, v in metadata.items()})
        return Checkpoint.from_store(self.store, **meta)

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint) -> "EnhancerPolicy":
        meta = ckpt.metadata
        policy = cls(
            num_prompts=int(meta["num_prompts"]),
            vocab_size=int(meta["vocab_size"]),
            max_len=int(meta["max_len"]),
            hidden=int(meta["hidden"]),
            stream=RngStream(0, ("enhancer", "load")),
        )
        ckpt.load_into(policy.store)
        return policy


def make_enhancer(
    num_prompts: int,
    vocab: ModifierVocab,
    max_len: int = 4,
    hidden: int = 24,
    stream: RngStream | None = None,
    end_bias: float = 2.0,
) -> EnhancerPolicy:
    """Fresh policy with a stopping prior: the END logit starts end_bias high.

    Without the prior, early training can lock every position onto the
    single best modifier before END is ever sampled, and the structure
    reward then has nothing to reinforce. The KL reference inherits the
    prior, which keeps termination cheap throughout training.
    """
    policy = EnhancerPolicy(num_prompts, vocab.size, max_len, hidden, stream)
    policy.store["out.b"].values[vocab.end_index] += end_bias
    return policy


# ----------------------------------------------------------------- sampling


def sample_enhanced(
    policy: EnhancerPolicy, vocab: ModifierVocab, prompt_id: int, stream: RngStream
) -> EnhancedPrompt:
    """Draw one token sequence position by position, stopping at END or max_len."""
    if vocab.size != policy.vocab_size:
        raise PromptEnhError("vocabulary size does not match the policy")
    table = policy.log_probs_np(prompt_id)
    tokens: list[str] = []
    picked: list[float] = []
    for pos in range(policy.max_len):
        probs = np.exp(table[pos])
        u = float(stream.uniform())
        idx = int(min(np.searchsorted(np.cumsum(probs), u), vocab.size - 1))
        tokens.append(vocab.tokens[idx])
        picked.append(table[pos, idx])
        if idx == vocab.end_index:
            break
    seq = tuple(tokens)
    # same reduction the training graph uses, so the stored value is bitwise
    # reproducible from the log-probability table
    logp = float(np.asarray(picked, dtype=np.float64).sum())
    return EnhancedPrompt(
        prompt_id=prompt_id,
        tokens=seq,
        logprob=logp,
        structure_valid=structure_reward(seq, policy.max_len) == 1.0,
    )


def structure_reward(tokens, max_len: int) -> float:
    """1 if the sequence is well formed, else 0.

    Well formed: length in [1, max_len], ends with END, and no repeated
    non-END token.
    """
    seq = list(tokens)
    if not 1 <= len(seq) <= max_len:
        return 0.0
    if seq[-1] != END_TOKEN:
        return 0.0
    body = [t for t in seq if t != END_TOKEN]
    if len(set(body)) != len(body):
        return 0.0
    return 1.0


def structure_penalty(tokens, max_len: int) -> float:
    """Graded variant: one third of the score per satisfied rule."""
    seq = list(tokens)
    ok_length = 1 <= len(seq) <= max_len
    ok_end = bool(seq) and seq[-1] == END_TOKEN
    body = [t for t in seq if t != END_TOKEN]
    ok_unique = len(set(body)) == len(body)
    return (ok_length + ok_end + ok_unique) / 3.0


# ----------------------------------------------------------------- effects


def resolve_guidance(vocab: ModifierVocab, tokens, anchor: np.ndarray):
    """Combined effect of a token sequence: (pull list, noise scale).

    Each pull entry is (strength, target point); targets sit at the prompt
    anchor plus the token's offset. Unknown tokens raise.
    """
    anchor = np.asarray(anchor, dtype=np.float64)
    pulls: list[tuple[float, np.ndarray]] = []
    noise_scale = 1.0
    for token in tokens:
        eff = vocab.effect(token)
        if eff.pull > 0.0:
            target = anchor.copy()
            if eff.offset:
                off = np.asarray(eff.offset, dtype=np.float64)
                if off.shape != anchor.shape:
                    raise PromptEnhError(
                        f"offset of '{token}' has shape {off.shape}, anchor {anchor.shape}"
                    )
                target = anchor + off
            pulls.append((eff.pull, target))
        noise_scale *= eff.noise_scale
    return pulls, noise_scale


def enhanced_sample(
    model: FlowNet,
    task: Task,
    prompt_id: int,
    tokens,
    vocab: ModifierVocab,
    n: int,
    schedule: NoiseSchedule,
    stream: RngStream,
) -> np.ndarray:
    """Terminal samples from the frozen generator under the token effects.

    Deterministic reverse integration; pulls enter the velocity as
    v + pull * (x - target), noise scaling enters the initial draw.
    """
    anchor = task.prompts[prompt_id].law.moments()[0]
    pulls, noise_scale = resolve_guidance(vocab, tokens, anchor)
    x = noise_scale * stream.normal(n, task.dim)
    for k in range(schedule.steps):
        t = schedule.time_at(k)
        v = model.forward_np(x, t, prompt_id)
        for strength, target in pulls:
            v = v + strength * (x - target)
        x = ode_step(x, v, schedule.dt)
    return x


def pe_outcome_reward(
    model: FlowNet,
    task: Task,
    prompt_id: int,
    tokens,
    vocab: ModifierVocab,
    weights: RewardWeights,
    schedule: NoiseSchedule,
    stream: RngStream,
    m_samples: int = 64,
) -> float:
    """Mean aggregate reward of m frozen-generator samples under the effects.

    Components are always measured against the original prompt's law.
    """
    agg, _ = _outcome_components(
        model, task, prompt_id, tokens, vocab, weights, schedule, stream, m_samples
    )
    return agg


def _outcome_components(
    model, task, prompt_id, tokens, vocab, weights, schedule, stream, m_samples
) -> tuple[float, np.ndarray]:
    samples = enhanced_sample(model, task, prompt_id, tokens, vocab, m_samples, schedule, stream)
    comp = component_matrix(task, prompt_id, samples)
    agg = float(weights.aggregate(comp).mean())
    return agg, comp.mean(axis=0)


# ----------------------------------------------------------------- KL


def categorical_kl(logp: np.ndarray, logq: np.ndarray) -> np.ndarray:
    """Row-wise exact KL(p || q) from two (m, K) log-probability tables."""
    logp = np.atleast_2d(np.asarray(logp, dtype=np.float64))
    logq = np.atleast_2d(np.asarray(logq, dtype=np.float64))
    if logp.shape != logq.shape:
        raise PromptEnhError(f"shape mismatch {logp.shape} vs {logq.shape}")
    return (np.exp(logp) * (logp - logq)).sum(axis=1)


def kl_term(
    policy: EnhancerPolicy, reference: EnhancerPolicy, prompt_id: int, tokens
) -> float:
    """Sum of exact per-position KL(policy || reference) over realized positions."""
    n_pos = len(tuple(tokens))
    if n_pos == 0:
        return 0.0
    lp = policy.log_probs_np(prompt_id)[:n_pos]
    lq = reference.log_probs_np(prompt_id)[:n_pos]
    return float(categorical_kl(lp, lq).sum())


# ----------------------------------------------------------------- training


@dataclass(frozen=True)
class PeConfig:
    group_size: int = 8
    clip_eps: float = 0.2
    beta_kl: float = 0.1
    lr: float = 5e-3
    iterations: int = 200
    m_samples: int = 64
    eps_std: float = 1e-6
    # must beat the outcome spread between token choices (about 2 std units
    # after standardization), or the policy trades well-formedness for reward
    w_structure: float = 2.0

    def __post_init__(self):
        if self.group_size < 2:
            raise PromptEnhError("group size must be at least 2")
        if not 0.0 < self.clip_eps < 1.0:
            raise PromptEnhError("clip epsilon must lie in (0, 1)")
        if self.beta_kl < 0 or self.lr < 0 or self.m_samples < 1:
            raise PromptEnhError("beta_kl >= 0, lr >= 0, m_samples >= 1")


def outcome_weights(w_align: float = 0.5, w_aesthetic: float = 0.3) -> RewardWeights:
    """Component weights for the outcome part of the enhancer reward."""
    return RewardWeights(weights=(w_align, w_aesthetic, 0.0, 0.0))


def pe_surrogate(
    policy: EnhancerPolicy,
    members: list[EnhancedPrompt],
    advantages: np.ndarray,
    vocab: ModifierVocab,
    clip_eps: float,
) -> tuple[Tensor, dict]:
    """Clipped sequence-ratio surrogate (negated objective) over all members.

    The ratio is exp(logp_theta(y) - logp_old(y)); logp_old is the value
    stored at sampling time, so the first update of an iteration starts at
    ratio exactly 1.
    """
    if len(members) != len(advantages):
        raise PromptEnhError("one advantage per member required")
    total = None
    clipped = 0
    tables: dict[int, Tensor] = {}
    for member, adv in zip(members, advantages):
        pid = member.prompt_id
        if pid not in tables:
            tables[pid] = policy.log_probs_graph(pid)
        n_pos = len(member.tokens)
        idx = np.array([vocab.index(t) for t in member.tokens], dtype=np.int64)
        picks = take_per_row(rows(tables[pid], np.arange(n_pos)), idx)
        ratio = exp(tsum(picks) - member.logprob)
        r = ratio.item()
        if not np.isfinite(r):
            raise PromptEnhError("non-finite sequence ratio")
        clipped += int(abs(r - 1.0) > clip_eps)
        a = float(adv)
        term = minimum(ratio * a, clamp(ratio, 1.0 - clip_eps, 1.0 + clip_eps) * a)
        total = term if total is None else total + term
    count = len(members)
    loss = total * (-1.0 / count)
    return loss, {"clip_frac": clipped / count}


def pe_kl_graph(
    policy: EnhancerPolicy,
    reference_tables: dict[int, np.ndarray],
    members: list[EnhancedPrompt],
) -> Tensor:
    """Mean over members of the exact positionwise KL to the reference."""
    total = None
    tables: dict[int, Tensor] = {}
    for member in members:
        pid = member.prompt_id
        if pid not in tables:
            tables[pid] = policy.log_probs_graph(pid)
        n_pos = len(member.tokens)
        ls = rows(tables[pid], np.arange(n_pos))
        ref = Tensor(reference_tables[pid][:n_pos])
        kl = tsum(sum_rows(exp(ls) * (ls - ref)))
        total = kl if total is None else total + kl
    return total * (1.0 / len(members))


def pe_grpo_train(
    policy: EnhancerPolicy,
    model: FlowNet,
    task: Task,
    vocab: ModifierVocab,
    config: PeConfig,
    weights: RewardWeights,
    schedule: NoiseSchedule,
    stream: RngStream,
) -> tuple[EnhancerPolicy, list[dict], dict]:
    """GRPO over token sequences against the frozen generator.

    One group of config.group_size sequences per prompt per iteration. The
    reward is the outcome aggregate plus w_structure times the binary
    structure reward, standardized within the group. The loss is the clipped
    surrogate plus beta_kl times the exact KL to the initialization
    (reference = the policy as passed in). Non-finite losses abort after
    restoring the last finite-loss parameters.
    """
    reference = policy.clone()
    ref_tables = {p: reference.log_probs_np(p) for p in range(task.num_prompts)}
    opt = AdamState(lr=config.lr)
    rows_out: list[dict] = []
    status: dict = {"iterations_run": 0}
    last_good = policy.store.snapshot()

    for it in range(config.iterations):
        members: list[EnhancedPrompt] = []
        advantages: list[np.ndarray] = []
        totals: list[float] = []
        comps: list[np.ndarray] = []
        for pid in range(task.num_prompts):
            group: list[EnhancedPrompt] = []
            group_totals = np.empty(config.group_size)
            for m in range(config.group_size):
                enhanced = sample_enhanced(
                    policy, vocab, pid, stream.child("seq", it, pid, m)
                )
                agg, comp = _outcome_components(
                    model, task, pid, enhanced.tokens, vocab, weights, schedule,
                    stream.child("out", it, pid, m), config.m_samples,
                )
                struct = structure_reward(enhanced.tokens, policy.max_len)
                group_totals[m] = agg + config.w_structure * struct
                group.append(enhanced)
                comps.append(comp)
            members.extend(group)
            advantages.append(compute_advantages(group_totals, config.eps_std))
            totals.extend(group_totals.tolist())
        adv = np.concatenate(advantages)

        loss_clip, stats = pe_surrogate(policy, members, adv, vocab, config.clip_eps)
        kl = pe_kl_graph(policy, ref_tables, members)
        loss = loss_clip + kl * config.beta_kl
        if not np.isfinite(loss.item()):
            policy.store.load(last_good)
            raise PromptEnhError(
                f"non-finite loss at iteration {it}; last good parameters restored"
            )
        backward(loss, store=policy.store)
        gnorm = grad_norm(policy.store)
        adam_step(policy.store, opt)
        last_good = policy.store.snapshot()

        comp_mean = np.mean(comps, axis=0)
        rows_out.append(
            {
                "stage": "pe",
                "iter": it,
                "mean_reward": float(np.mean(totals)),
                "r_align": float(comp_mean[0]),
                "r_video": float(comp_mean[1]),
                "kl": float(kl.item()),
                "clip_frac": float(stats["clip_frac"]),
                "grad_norm": float(gnorm),
                "validity": float(np.mean([m.structure_valid for m in members])),
            }
        )
        status["iterations_run"] = it + 1

    return policy, rows_out, status

"""Synthetic fork scenarios: paired table models with a scripted correct
path, scripted decision forks where the base model splits probability mass,
and a closed-form enumeration of success probabilities per decoder kind.

The script is a linear token chain in which every position has its own
token id, so a length-1 context suffix pins down the position. Wrong fork
branches rejoin the script immediately: only the single fork token differs,
which keeps the per-position distributions (and therefore the whole score
sequence and every gate decision) independent of the sampled path.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .distributions import MetricKind, TokenDistribution, Vocab, disagreement_score, entropy
from .errors import ScenarioSpecError
from .gated_decoder import GateConfig, gate
from .models import SamplerConfig, TableModel, effective_sampling_probs

EOS_ID = 0
PROMPT_ID = 1
DEFAULT_GUIDE_CORRECT = 0.999
DEFAULT_FILLER_NOISE = 1e-4


def _broadcast(value, n: int, name: str) -> tuple[float, ...]:
    if isinstance(value, (int, float)):
        return (float(value),) * n
    out = tuple(float(v) for v in value)
    if len(out) != n:
        raise ScenarioSpecError(f"{name} must have one entry per fork, got {len(out)}")
    return out


@dataclass(frozen=True)
class ScenarioSpec:
    """Generator description for a paired fork scenario."""

    n_forks: int
    fork_positions: tuple[int, ...]
    base_error_prob: tuple[float, ...]
    filler_length: int
    guide_correct_prob: tuple[float, ...] = ()
    filler_noise: float = DEFAULT_FILLER_NOISE
    n_prompts: int = 1

    def __post_init__(self) -> None:
        object.__setattr__(self, "fork_positions", tuple(int(p) for p in self.fork_positions))
        object.__setattr__(
            self, "base_error_prob", _broadcast(self.base_error_prob, self.n_forks, "base_error_prob")
        )
        gq = self.guide_correct_prob if self.guide_correct_prob else DEFAULT_GUIDE_CORRECT
        object.__setattr__(
            self, "guide_correct_prob", _broadcast(gq, self.n_forks, "guide_correct_prob")
        )
        if self.n_forks != len(self.fork_positions):
            raise ScenarioSpecError("n_forks must match the number of fork positions")
        if self.filler_length < 0:
            raise ScenarioSpecError("filler_length must be >= 0")
        if self.script_length < 1:
            raise ScenarioSpecError("scenario must emit at least one token")
        if any(p2 <= p1 for p1, p2 in zip(self.fork_positions, self.fork_positions[1:])):
            raise ScenarioSpecError("fork_positions must be strictly increasing")
        if any(not 1 <= p <= self.script_length for p in self.fork_positions):
            raise ScenarioSpecError("fork_positions must lie within the script")
        if any(not 0 <= e <= 1 for e in self.base_error_prob):
            raise ScenarioSpecError("base_error_prob entries must lie in [0, 1]")
        if any(not 0 < q <= 1 for q in self.guide_correct_prob):
            raise ScenarioSpecError("guide_correct_prob entries must lie in (0, 1]")
        if not 0 <= self.filler_noise < 0.5:
            raise ScenarioSpecError("filler_noise must lie in [0, 0.5)")
        if self.n_prompts < 1:
            raise ScenarioSpecError("n_prompts must be >= 1")

    @property
    def script_length(self) -> int:
        """Emitted tokens before the terminating EOS."""
        return self.filler_length + self.n_forks

    @property
    def total_steps(self) -> int:
        """Rollout length T including the EOS step."""
        return self.script_length + 1

    @property
    def vocab_size(self) -> int:
        return 2 + self.filler_length + 2 * self.n_forks


@dataclass(frozen=True)
class Scenario:
    """Generated scenario bundle: models plus the script metadata the
    enumeration oracle works from."""

    spec: ScenarioSpec
    base: TableModel
    guide: TableModel
    eos_id: int
    prompt_tokens: tuple[int, ...]
    gold_tokens: tuple[int, ...]
    correct_path: tuple[int, ...]  # gold_tokens + (eos,)
    fork_index: dict[int, int]  # position -> fork ordinal

    def prompts(self) -> list[tuple[str, tuple[int, ...], tuple[int, ...]]]:
        return [
            (f"scenario-{i:04d}", self.prompt_tokens, self.gold_tokens)
            for i in range(self.spec.n_prompts)
        ]


def build_scenario(spec: ScenarioSpec, seed: int = 0) -> Scenario:
    """Construct the paired table models for a spec.

    Deterministic given the spec; ``seed`` is accepted for interface
    symmetry with the samplers but nothing here draws randomness.
    """
    del seed
    vocab = Vocab(spec.vocab_size)
    forks = set(spec.fork_positions)
    fork_index = {p: i for i, p in enumerate(spec.fork_positions)}

    # Allocate one token id per filler position, two per fork position.
    next_id = 2
    correct_tok: dict[int, int] = {}
    wrong_tok: dict[int, int] = {}
    for pos in range(1, spec.script_length + 1):
        correct_tok[pos] = next_id
        next_id += 1
        if pos in forks:
            wrong_tok[pos] = next_id
            next_id += 1

    def filler_row(target: int) -> np.ndarray:
        row = np.zeros(vocab.size)
        row[target] = 1.0 - spec.filler_noise
        row[EOS_ID] += spec.filler_noise
        return row

    base_rows: dict[tuple[int, ...], np.ndarray] = {}
    guide_rows: dict[tuple[int, ...], np.ndarray] = {}
    for pos in range(1, spec.total_steps + 1):
        if pos == 1:
            keys = [(PROMPT_ID,)]
        elif (pos - 1) in forks:
            keys = [(correct_tok[pos - 1],), (wrong_tok[pos - 1],)]
        else:
            keys = [(correct_tok[pos - 1],)]

        if pos == spec.total_steps:
            row_b = np.zeros(vocab.size)
            row_b[EOS_ID] = 1.0
            row_g = row_b.copy()
        elif pos in forks:
            k = fork_index[pos]
            row_b = np.zeros(vocab.size)
            row_b[correct_tok[pos]] = 1.0 - spec.base_error_prob[k]
            row_b[wrong_tok[pos]] = spec.base_error_prob[k]
            row_g = np.zeros(vocab.size)
            row_g[correct_tok[pos]] = spec.guide_correct_prob[k]
            row_g[wrong_tok[pos]] = 1.0 - spec.guide_correct_prob[k]
        else:
            row_b = filler_row(correct_tok[pos])
            row_g = row_b.copy()

        for key in keys:
            base_rows[key] = row_b
            guide_rows[key] = row_g

    default = np.zeros(vocab.size)
    default[EOS_ID] = 1.0
    gold = tuple(correct_tok[pos] for pos in range(1, spec.script_length + 1))
    return Scenario(
        spec=spec,
        base=TableModel(vocab, base_rows, default, name="scenario-base"),
        guide=TableModel(vocab, guide_rows, default, name="scenario-guide"),
        eos_id=EOS_ID,
        prompt_tokens=(PROMPT_ID,),
        gold_tokens=gold,
        correct_path=gold + (EOS_ID,),
        fork_index=fork_index,
    )


def generate_scenario(spec: ScenarioSpec, seed: int = 0):
    """Contract-shaped wrapper: (base model, guide model, prompts, golds)."""
    scn = build_scenario(spec, seed)
    prompts = [list(tokens) for _, tokens, _ in scn.prompts()]
    golds = [list(gold) for _, _, gold in scn.prompts()]
    return scn.base, scn.guide, prompts, golds


# --- enumeration oracle -------------------------------------------------------


def _position_dists(scn: Scenario, t: int) -> tuple[TokenDistribution, TokenDistribution]:
    """Model distributions at step t (1-based). Path-independent because
    wrong branches rejoin the script immediately."""
    ctx = scn.prompt_tokens + scn.correct_path[: t - 1]
    return scn.base.next_distribution(ctx), scn.guide.next_distribution(ctx)


def score_sequence(scn: Scenario, metric: MetricKind) -> list[float]:
    """The deterministic per-step score sequence every rollout realizes."""
    out = []
    for t in range(1, scn.spec.total_steps + 1):
        p_b, p_r = _position_dists(scn, t)
        out.append(disagreement_score(metric, p_b, p_r))
    return out


def expected_gate_bits(scn: Scenario, gate_cfg: GateConfig) -> list[bool]:
    """Gate decisions the guided decoder must reproduce on every rollout."""
    scores = score_sequence(scn, gate_cfg.metric)
    bits = []
    history: list[float] = []
    for s_t in scores:
        bits.append(gate(s_t, gate_cfg, history[::-1]))
        history.append(s_t)
        if len(history) > gate_cfg.window:
            del history[0]
    return bits


def success_prob(
    scn: Scenario,
    decoder_kind: str,
    sampler_cfg: SamplerConfig,
    *,
    gate_cfg: GateConfig | None = None,
    rho_target: float | None = None,
    guide_len: int | None = None,
) -> float:
    """Closed-form exact-match success probability for one decoder kind.

    Multiplies, over every script position, the effective (post temperature
    and nucleus) probability that the active model emits the scripted
    token. Filler factors are 1 whenever the noise mass is truncated away,
    so with the default parameters the product reduces to the fork terms.
    """
    if decoder_kind in ("guided", "entropy_gated"):
        if gate_cfg is None:
            raise ValueError("gated decoders need a gate_cfg")
        bits = expected_gate_bits(scn, gate_cfg)
    elif decoder_kind == "random":
        if rho_target is None:
            raise ValueError("random decoder needs rho_target")
    elif decoder_kind == "early_only":
        if rho_target is None or guide_len is None:
            raise ValueError("early-only decoder needs rho_target and guide_len")
        cutoff = int(np.floor(rho_target * guide_len))
    elif decoder_kind not in ("base_only", "guide_only"):
        raise ValueError(f"unknown decoder kind {decoder_kind!r}")

    prob = 1.0
    for t in range(1, scn.spec.total_steps + 1):
        p_b, p_r = _position_dists(scn, t)
        target = scn.correct_path[t - 1]
        eff_b = effective_sampling_probs(p_b, sampler_cfg)[target]
        eff_g = effective_sampling_probs(p_r, sampler_cfg)[target]
        if decoder_kind == "base_only":
            factor = eff_b
        elif decoder_kind == "guide_only":
            factor = eff_g
        elif decoder_kind in ("guided", "entropy_gated"):
            factor = eff_g if bits[t - 1] else eff_b
        elif decoder_kind == "random":
            factor = rho_target * eff_g + (1.0 - rho_target) * eff_b
        else:  # early_only
            factor = eff_g if t <= cutoff else eff_b
        prob *= float(factor)
    return prob


def filler_background_score(scn: Scenario, metric: MetricKind) -> float:
    """Score every filler step realizes (entropy of the shared filler row)."""
    for t in range(1, scn.spec.total_steps):
        if t not in scn.fork_index:
            p_b, p_r = _position_dists(scn, t)
            return disagreement_score(metric, p_b, p_r)
    p_b, p_r = _position_dists(scn, scn.spec.total_steps)
    return disagreement_score(metric, p_b, p_r)


def base_entropy_sequence(scn: Scenario) -> list[float]:
    """Per-step base-model entropy along the script."""
    return [
        entropy(_position_dists(scn, t)[0]) for t in range(1, scn.spec.total_steps + 1)
    ]

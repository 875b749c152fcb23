"""Composite priority dispatching rules and a seeded random agent."""

from __future__ import annotations

import itertools
from dataclasses import dataclass

from .model import derive_stream
from .sim import Action, Observation, Snapshot, encode_observation

SEQUENCING = ("SPT", "LPT", "FIFO", "LIFO", "LWKR", "MWKR", "LOPNR", "MOPNR")
ASSIGNMENT = ("LIT", "LWL", "SPT")

# Sort key for the ready operation; smaller is preferred.
_SEQ_KEYS = {
    "SPT": lambda r: r["nominal"],
    "LPT": lambda r: -r["nominal"],
    "FIFO": lambda r: r["arrival"],
    "LIFO": lambda r: -r["arrival"],
    "LWKR": lambda r: r["remaining_work"],
    "MWKR": lambda r: -r["remaining_work"],
    "LOPNR": lambda r: r["remaining_ops"],
    "MOPNR": lambda r: -r["remaining_ops"],
}


class AgentError(ValueError):
    pass


@dataclass(frozen=True)
class RuleKey:
    sequencing: str
    assignment: str

    def __post_init__(self):
        if self.sequencing not in SEQUENCING:
            raise AgentError(f"unknown sequencing rule {self.sequencing!r}")
        if self.assignment not in ASSIGNMENT:
            raise AgentError(f"unknown assignment rule {self.assignment!r}")

    @property
    def name(self) -> str:
        return f"{self.sequencing}+{self.assignment}"

    @classmethod
    def parse(cls, text: str) -> RuleKey:
        seq, sep, asg = text.partition("+")
        if not sep:
            raise AgentError(f"rule must look like SEQ+ASSIGN, got {text!r}")
        return cls(seq.strip().upper(), asg.strip().upper())


def all_rules() -> list[RuleKey]:
    return [RuleKey(s, a) for s, a in itertools.product(SEQUENCING, ASSIGNMENT)]


def _machine_key(rule: str, op_nominal: float, m: dict, lit_mode: str, lwl_mode: str):
    if rule == "LIT":
        if lit_mode == "available":
            return (m["idle_since"], m["busy_time"])
        return (-m["busy_time"],)
    if rule == "LWL":
        return (m["assigned_work"],) if lwl_mode == "assigned" else (m["busy_time"],)
    return (op_nominal / m["speed"],)


def pdr_decide(obs: Observation, rule: RuleKey, lit_mode: str = "available", lwl_mode: str = "assigned") -> Action:
    """Apply a composite rule to an L1 observation.

    The sequencing rule picks the operation, the assignment rule picks the
    machine among idle eligible ones; ties go to the lower job id, then the
    lower machine id.
    """
    actions = obs["actions"]
    if not actions:
        raise AgentError("no admissible action")
    seq = _SEQ_KEYS[rule.sequencing]
    best = min(obs["ready"], key=lambda r: (seq(r), r["job"]))
    machines = {m["id"]: m for m in obs["machines"]}
    options = [a for a in actions if a[0] == best["job"]]
    choice = min(
        options,
        key=lambda a: (_machine_key(rule.assignment, best["nominal"], machines[a[2]], lit_mode, lwl_mode), a[2]),
    )
    return Action(int(choice[0]), int(choice[1]), str(choice[2]))


class PdrAgent:
    def __init__(self, rule: RuleKey | str, lit_mode: str = "available", lwl_mode: str = "assigned"):
        self.rule = RuleKey.parse(rule) if isinstance(rule, str) else rule
        if lit_mode not in ("available", "busy"):
            raise AgentError(f"unknown LIT mode {lit_mode!r}")
        if lwl_mode not in ("assigned", "busy"):
            raise AgentError(f"unknown LWL mode {lwl_mode!r}")
        self.lit_mode = lit_mode
        self.lwl_mode = lwl_mode

    @property
    def name(self) -> str:
        return f"pdr:{self.rule.name}"

    def decide(self, snap: Snapshot) -> Action:
        return pdr_decide(encode_observation(snap, "L1"), self.rule, self.lit_mode, self.lwl_mode)


def random_decide(actions, rng) -> Action:
    if not actions:
        raise AgentError("no admissible action")
    return Action(*actions[int(rng.integers(len(actions)))])


class RandomAgent:
    """Uniform choice over the admissible set; reseeded on every reset."""

    def __init__(self, seed: int = 0):
        self.seed = int(seed)
        self.reset()

    @property
    def name(self) -> str:
        return f"random:seed={self.seed}"

    def reset(self) -> None:
        self.rng = derive_stream(self.seed, "agent")

    def decide(self, snap: Snapshot) -> Action:
        return random_decide(snap.actions, self.rng)


def parse_agent(text: str):
    """Build an agent from ``pdr:SEQ+ASSIGN`` or ``random[:seed=N]``."""
    kind, _, rest = text.partition(":")
    if kind == "pdr":
        return PdrAgent(rest)
    if kind == "random":
        seed = 0
        if rest:
            key, sep, value = rest.partition("=")
            if key != "seed" or not sep:
                raise AgentError(f"expected random:seed=N, got {text!r}")
            try:
                seed = int(value)
            except ValueError:
                raise AgentError(f"seed must be an integer, got {value!r}") from None
        return RandomAgent(seed)
    raise AgentError(f"unknown agent {text!r}; expected pdr:SEQ+ASSIGN or random:seed=N")


def pdr_pool() -> list[PdrAgent]:
    return [PdrAgent(r) for r in all_rules()]

"""Plant one constraint violation of a given class into a clean trajectory."""

from __future__ import annotations

from dataclasses import replace

from shopstream.model import Cancellation, MachineDown

PLANTED = ("overlap", "precedence", "downtime", "duration", "cancelled")


def _shift(r, dt):
    return replace(r, start=r.start + dt, end=r.end + dt, gaps=tuple((s + dt, e + dt) for s, e in r.gaps))


def _swap(traj, old, new):
    recs = [new if r is old else r for r in traj.records]
    return replace(traj, records=tuple(sorted(recs, key=lambda r: (r.start, r.machine))))


def inject(traj, stream, kind, rng):
    """Return ``(trajectory, stream)`` carrying one planted fault of ``kind``."""
    recs = traj.records
    if kind == "overlap":
        by_machine = {}
        for r in recs:
            by_machine.setdefault(r.machine, []).append(r)
        pairs = [
            (a, b)
            for rs in by_machine.values()
            for a, b in zip(sorted(rs, key=lambda r: r.start), sorted(rs, key=lambda r: r.start)[1:])
        ]
        a, b = pairs[int(rng.integers(len(pairs)))]
        return _swap(traj, b, _shift(b, a.start + 0.5 * (a.end - a.start) - b.start)), stream
    if kind == "precedence":
        by_job = {}
        for r in recs:
            by_job.setdefault(r.job, {})[r.op] = r
        cands = [(ops[k - 1], ops[k]) for ops in by_job.values() for k in ops if k > 0 and k - 1 in ops]
        prev, cur = cands[int(rng.integers(len(cands)))]
        return _swap(traj, cur, _shift(cur, prev.start - cur.start)), stream
    if kind == "duration":
        r = recs[int(rng.integers(len(recs)))]
        return _swap(traj, r, replace(r, end=r.end + 0.25 * (r.end - r.start) + 1e-3)), stream
    if kind == "downtime":
        # Outages are clipped to the horizon, so plant inside [0, H].
        H = stream.horizon
        cands = [r for r in recs if r.start < H and r.end > r.start]
        r = cands[int(rng.integers(len(cands)))]
        stop = min([s for s, _ in r.gaps] + [r.end, H])
        mid = 0.5 * (r.start + stop)
        length = 0.1 * (stop - r.start)
        return traj, stream.rebuild(stream.pairs() + [(mid, MachineDown(r.machine, length))])
    if kind == "cancelled":
        r = recs[int(rng.integers(len(recs)))]
        first = min(x.start for x in recs if x.job == r.job)
        return traj, stream.rebuild(stream.pairs() + [(first, Cancellation(r.job))])
    raise ValueError(kind)

"""Deterministic interleaving of concurrent inserts through the engine's step hook.

Each thread named in a schedule may only pass a hook point when the schedule
says it is its turn. A schedule that asks a second writer to take the array
lock while the first still holds it cannot happen; the harness detects that
the second writer never arrives (it is blocked on the lock), marks the
schedule infeasible and lets the remaining steps run freely.
"""

import itertools
import threading
import time

STEPS = ("enter", "locked", "written", "committed")


def interleavings(labels, steps=STEPS):
    """Every merge of the per-thread step sequences that keeps each thread's order."""
    slots = [lab for lab in labels for _ in steps]
    seen = set()
    for perm in itertools.permutations(slots):
        if perm in seen:
            continue
        seen.add(perm)
        counters = dict.fromkeys(labels, 0)
        out = []
        for lab in perm:
            out.append((lab, steps[counters[lab]]))
            counters[lab] += 1
        yield out


def feasible(schedule):
    """True iff no thread is scheduled to take the lock while another holds it."""
    holder = None
    for lab, step in schedule:
        if step == "locked":
            if holder is not None:
                return False
            holder = lab
        elif step == "written":
            holder = None
    return True


class Scheduler:
    def __init__(self, schedule, steps=STEPS, patience=0.15, timeout=10.0):
        self.schedule = list(schedule)
        self.steps = set(steps)
        self.pos = 0
        self.cond = threading.Condition()
        self.free = False
        self.infeasible = False
        self.holder = None
        self.violation = False
        self.trace = []
        self.patience = patience
        self.timeout = timeout

    def _wait(self, ready):
        """Wait on the condition until ``ready()`` or free mode; detects lock blocking."""
        start = time.monotonic()
        stuck_since = None
        while not self.free and not ready():
            nxt_lab, nxt_step = self.schedule[self.pos]
            if nxt_step == "locked" and self.holder is not None and self.holder != nxt_lab:
                # the scheduled thread must now be blocked on the array lock
                stuck_since = stuck_since or time.monotonic()
                if time.monotonic() - stuck_since >= self.patience:
                    self.free = self.infeasible = True
                    break
            if time.monotonic() - start > self.timeout:
                raise RuntimeError(f"schedule stalled at {self.schedule[self.pos]}")
            self.cond.wait(0.01)

    def __call__(self, step, array):
        me = threading.current_thread().name
        with self.cond:
            if step in self.steps:
                self._wait(lambda: self.schedule[self.pos] == (me, step))
                self.trace.append((me, step))
                if step == "locked":
                    if self.holder is not None:
                        self.violation = True
                    self.holder = me
                elif step == "written":
                    self.holder = None
                if not self.free:
                    self.pos += 1
                self.cond.notify_all()
            if step == "enter":
                # only head for the lock once the schedule says this thread locks next,
                # so acquisition order follows the schedule rather than a race
                self._wait(lambda: self.schedule[self.pos] == (me, "locked"))


def run_schedule(engine, array, batches, schedule, steps=STEPS, patience=0.15):
    """Insert ``batches[label] = (coords, values)`` concurrently under ``schedule``."""
    sched = Scheduler(schedule, steps=steps, patience=patience)
    engine.hook = sched
    errors = []

    def client(lab):
        try:
            engine.insert(array, *batches[lab])
        except BaseException as exc:  # surfaced below
            errors.append(exc)

    threads = [threading.Thread(target=client, args=(lab,), name=lab) for lab in batches]
    for t in threads:
        t.start()
    for t in threads:
        t.join(30)
    engine.hook = lambda step, array: None
    if errors:
        raise errors[0]
    return sched


def replay(batches, order, base=None):
    """Serial oracle: apply batches in ``order`` to a dict, last write wins."""
    state = dict(base or {})
    for lab in order:
        coords, values = batches[lab]
        for c, v in zip(coords, values):
            state[tuple(int(x) for x in c)] = v
    return state

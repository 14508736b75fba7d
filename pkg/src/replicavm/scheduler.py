"""Replica placement over a router tree with host leaves and one NAS node.

Hard constraints: the replicas of one VM sit on distinct hosts, and every
chosen host stays below ``u_max`` projected utilization.  Among feasible
placements the objective is

    cost = alpha * sum(storage distance of each replica)
         + beta  * sum(distance primary -> secondary)
         - gamma * (number of distinct branches used)

where a branch is the subtree under one child of the root and distances are
edge-cost sums along the tree path (hop counts with the default cost of 1).
"""

from __future__ import annotations

import itertools
import json
import random
from dataclasses import dataclass, field
from typing import Iterable, Optional

U_MAX = 0.7


class Infeasible(Exception):
    def __init__(self, available: int, vm: str = ""):
        super().__init__(f"infeasible: {available} available" + (f" for {vm}" if vm else ""))
        self.available = available
        self.vm = vm


class TopologyError(ValueError):
    pass


@dataclass(frozen=True)
class Weights:
    alpha: float = 1.0
    beta: float = 1.0
    gamma: float = 0.5
    u_max: float = U_MAX


@dataclass
class Host:
    name: str
    capacity: float = 1.0
    utilization: float = 0.0


@dataclass(frozen=True)
class VM:
    name: str
    demand: float = 0.1


@dataclass
class Placement:
    vm: str
    primary: str
    secondaries: tuple
    storage_cost: float = 0.0
    stream_cost: float = 0.0
    branches: int = 0
    cost: float = 0.0
    degraded: tuple = ()

    @property
    def hosts(self) -> tuple:
        return (self.primary,) + tuple(self.secondaries)


class Topology:
    """Router tree.  ``parent`` maps every node except the root to its parent;
    ``cost`` gives the weight of the edge above a node (default 1)."""

    def __init__(self, root: str, parent: dict, hosts: Iterable[Host], storage: str,
                 cost: Optional[dict] = None):
        self.root = root
        self.parent = dict(parent)
        self.hosts = {h.name: h for h in hosts}
        self.storage = storage
        self.cost = dict(cost or {})
        self._validate()
        self._up = {n: self._ancestry(n) for n in self.nodes}

    @property
    def nodes(self) -> list:
        return [self.root] + list(self.parent)

    def _validate(self) -> None:
        if self.root in self.parent:
            raise TopologyError("root has a parent")
        known = set(self.nodes)
        for child, par in self.parent.items():
            if par not in known:
                raise TopologyError(f"{child}: unknown parent {par!r}")
        for n in self.parent:
            seen = set()
            while n != self.root:
                if n in seen:
                    raise TopologyError(f"cycle through {n!r}")
                seen.add(n)
                n = self.parent[n]
        children = set(self.parent.values())
        for name, h in self.hosts.items():
            if name not in self.parent:
                raise TopologyError(f"host {name!r} is not attached")
            if name in children:
                raise TopologyError(f"host {name!r} has children")
            if not 0.0 <= h.utilization <= 1.0:
                raise TopologyError(f"host {name!r}: utilization {h.utilization} outside [0, 1]")
            if h.capacity <= 0:
                raise TopologyError(f"host {name!r}: capacity must be positive")
        if self.storage not in known:
            raise TopologyError(f"storage node {self.storage!r} is not in the tree")
        for n, c in self.cost.items():
            if n not in self.parent or c < 0:
                raise TopologyError(f"bad edge cost for {n!r}")

    def _ancestry(self, n: str) -> list:
        """(node, distance from n) up to the root."""
        out = [(n, 0.0)]
        d = 0.0
        while n != self.root:
            d += self.cost.get(n, 1.0)
            n = self.parent[n]
            out.append((n, d))
        return out

    def dist(self, a: str, b: str) -> float:
        up_a = dict(self._up[a])
        for node, db in self._up[b]:
            if node in up_a:
                return up_a[node] + db
        raise TopologyError("disconnected")  # unreachable for a validated tree

    def branch(self, n: str) -> str:
        chain = self._up[n]
        return chain[-2][0] if len(chain) > 1 else n

    def utilization(self) -> dict:
        return {name: h.utilization for name, h in self.hosts.items()}

    # -- files -----------------------------------------------------------------

    @classmethod
    def from_dict(cls, data: dict) -> "Topology":
        parent, cost = {}, {}
        for r in data.get("routers", []):
            parent[r["name"]] = r["parent"]
            if "cost" in r:
                cost[r["name"]] = float(r["cost"])
        hosts = []
        for h in data["hosts"]:
            parent[h["name"]] = h["parent"]
            if "cost" in h:
                cost[h["name"]] = float(h["cost"])
            hosts.append(Host(h["name"], float(h.get("capacity", 1.0)), float(h.get("utilization", 0.0))))
        st = data["storage"]
        if isinstance(st, dict):
            parent[st["name"]] = st["parent"]
            storage = st["name"]
        else:
            storage = st
        return cls(data["root"], parent, hosts, storage, cost)

    def to_dict(self) -> dict:
        hosts = set(self.hosts)
        routers = [n for n in self.parent if n not in hosts and n != self.storage]

        def entry(n):
            d = {"name": n, "parent": self.parent[n]}
            if n in self.cost:
                d["cost"] = self.cost[n]
            return d

        out = {
            "root": self.root,
            "routers": [entry(n) for n in routers],
            "hosts": [dict(entry(n), capacity=h.capacity, utilization=h.utilization)
                      for n, h in self.hosts.items()],
        }
        out["storage"] = entry(self.storage) if self.storage in self.parent else self.storage
        return out

    @classmethod
    def load(cls, path) -> "Topology":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def load_vms(path) -> list:
    with open(path) as fh:
        data = json.load(fh)
    if isinstance(data, dict):
        data = data["vms"]
    return [VM(v["name"], float(v.get("demand", 0.1))) for v in data]


# -- cost ------------------------------------------------------------------------

def score(topo: Topology, primary: str, secondaries, w: Weights) -> Placement:
    hosts = (primary,) + tuple(secondaries)
    storage = sum(topo.dist(h, topo.storage) for h in hosts)
    stream = sum(topo.dist(primary, s) for s in secondaries)
    branches = len({topo.branch(h) for h in hosts})
    cost = w.alpha * storage + w.beta * stream - w.gamma * branches
    return Placement("", primary, tuple(secondaries), storage, stream, branches, cost)


def _fits(util: float, demand: float, capacity: float, u_max: float) -> bool:
    return util + demand / capacity < u_max


def feasible_hosts(topo: Topology, util: dict, demand: float, u_max: float) -> list:
    return sorted(h for h, host in topo.hosts.items() if _fits(util[h], demand, host.capacity, u_max))


# -- greedy --------------------------------------------------------------------

def _pick_secondary(topo: Topology, primary: str, pool: list, used: set, w: Weights,
                    util: dict) -> str:
    fresh = [h for h in pool if topo.branch(h) not in used]
    cands = fresh or pool
    return min(cands, key=lambda h: (w.beta * topo.dist(primary, h),
                                     w.alpha * topo.dist(h, topo.storage), util[h], h))


def greedy_one(topo: Topology, demand: float, n: int, w: Weights, util: dict,
               vm: str = "") -> Placement:
    feas = feasible_hosts(topo, util, demand, w.u_max)
    if len(feas) < n:
        raise Infeasible(len(feas), vm)
    primary = min(feas, key=lambda h: (w.alpha * topo.dist(h, topo.storage), util[h], h))
    chosen = [primary]
    used = {topo.branch(primary)}
    for _ in range(n - 1):
        pool = [h for h in feas if h not in chosen]
        h = _pick_secondary(topo, primary, pool, used, w, util)
        chosen.append(h)
        used.add(topo.branch(h))
    p = score(topo, primary, chosen[1:], w)
    p.vm = vm
    return p


def place_replicas(topo: Topology, vms, n: int, w: Weights = Weights()) -> tuple:
    """Greedy placement of every VM in order; returns (placements, projected utilization)."""
    util = topo.utilization()
    out = []
    for vm in vms:
        p = greedy_one(topo, vm.demand, n, w, util, vm.name)
        for h in p.hosts:
            util[h] += vm.demand / topo.hosts[h].capacity
        out.append(p)
    return out, util


def brute_force_one(topo: Topology, demand: float, n: int, w: Weights, util: dict,
                    require_diversity: bool = True) -> Placement:
    """Exhaustive optimum over every (primary, secondary set) assignment.

    With ``require_diversity`` only assignments that use min(n, feasible
    branches) distinct branches count, the same rule every placement obeys.
    """
    feas = feasible_hosts(topo, util, demand, w.u_max)
    if len(feas) < n:
        raise Infeasible(len(feas))
    want = min(n, len({topo.branch(h) for h in feas}))
    best = None
    for primary in feas:
        rest = [h for h in feas if h != primary]
        for secs in itertools.combinations(rest, n - 1):
            p = score(topo, primary, secs, w)
            if require_diversity and p.branches < want:
                continue
            if best is None or p.cost < best.cost:
                best = p
    return best


# -- rebalance -------------------------------------------------------------------

@dataclass
class Rebalance:
    moves: list  # (vm, from host, to host)
    degraded: list  # (vm, host)
    placements: list
    utilization: dict


def rebalance(topo: Topology, placements: list, report: dict, demands: dict,
              w: Weights = Weights()) -> Rebalance:
    """Move every replica off hosts at or above ``u_max`` in ``report``.

    ``report`` is the fresh measured utilization (including our replicas).
    The other replicas of the VM stay fixed; a replica with no feasible
    target stays where it is and is flagged degraded.
    """
    util = {h: report.get(h, topo.hosts[h].utilization) for h in topo.hosts}
    hot = {h for h, u in util.items() if u >= w.u_max}
    moves, degraded, out = [], [], []
    for p in placements:
        d = demands[p.vm]
        hosts = list(p.hosts)
        flagged = []
        for i, h in enumerate(hosts):
            if h not in hot:
                continue
            others = [x for j, x in enumerate(hosts) if j != i]
            pool = [x for x in feasible_hosts(topo, util, d, w.u_max) if x not in others and x not in hot]
            if not pool:
                flagged.append(h)
                degraded.append((p.vm, h))
                continue
            if i == 0:
                used = {topo.branch(x) for x in others}
                fresh = [x for x in pool if topo.branch(x) not in used] or pool
                target = min(fresh, key=lambda x: (w.alpha * topo.dist(x, topo.storage), util[x], x))
            else:
                used = {topo.branch(x) for x in others}
                target = _pick_secondary(topo, hosts[0], pool, used, w, util)
            util[target] += d / topo.hosts[target].capacity
            util[h] -= d / topo.hosts[h].capacity
            hosts[i] = target
            moves.append((p.vm, h, target))
        q = score(topo, hosts[0], hosts[1:], w)
        q.vm = p.vm
        q.degraded = tuple(flagged)
        out.append(q)
    return Rebalance(moves, degraded, out, util)


# -- independent checker ---------------------------------------------------------

def validate(topo: Topology, placements: list, utilization: dict, u_max: float = U_MAX) -> list:
    """Hard-constraint violations, as readable strings (empty when valid).

    ``utilization`` is the final per-host load the placements imply; degraded
    replicas are exempt from the utilization bound.
    """
    errors = []
    for p in placements:
        hosts = p.hosts
        if len(set(hosts)) != len(hosts):
            errors.append(f"{p.vm}: hosts not distinct {hosts}")
        for h in hosts:
            if h not in topo.hosts:
                errors.append(f"{p.vm}: unknown host {h}")
            elif h not in p.degraded and not utilization[h] < u_max:
                errors.append(f"{p.vm}: {h} at {utilization[h]:.3f} >= {u_max}")
    return errors


# -- random instances ------------------------------------------------------------

def random_topology(rng: random.Random, max_hosts: int = 20, max_util: float = 0.6) -> Topology:
    """Root, 1-4 branch routers, optional second router level, 1-3 hosts per leaf router."""
    parent, hosts = {}, []
    nbranch = rng.randint(1, 4)
    leaves = []
    for b in range(nbranch):
        r = f"r{b}"
        parent[r] = "core"
        if rng.random() < 0.3:
            for k in range(rng.randint(1, 2)):
                parent[f"{r}.{k}"] = r
                leaves.append(f"{r}.{k}")
        else:
            leaves.append(r)
    for leaf in leaves:
        for _ in range(rng.randint(1, 3)):
            if len(hosts) >= max_hosts:
                break
            name = f"h{len(hosts)}"
            parent[name] = leaf
            hosts.append(Host(name, rng.choice([1.0, 2.0]), round(rng.uniform(0.0, max_util), 3)))
    parent["nas"] = rng.choice(["core"] + list(parent))
    while parent["nas"].startswith("h"):
        parent["nas"] = rng.choice(leaves)
    return Topology("core", parent, hosts, "nas")

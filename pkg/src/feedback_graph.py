"""Per-round feedback graph construction under a transmission budget."""
import logging
import math
from functools import lru_cache
from typing import FrozenSet, Iterable, Optional, Sequence, Tuple

import networkx as nx
import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from src.exceptions import ConfigError, ContractViolationError, DiagnosticUnavailableError
from src.models import Budget, ModelId

logger = logging.getLogger(__name__)

WEIGHT_FLOOR = 1e-300
# Relative slack for the weight-sum bound, which is summed in a different order.
WEIGHT_BOUND_RTOL = 1e-12
MAX_ALPHA_VERTICES = 25


class FeedbackGraph(BaseModel):
    """Directed graph G_t over the K models; (k, j) is an edge iff j is an
    out-neighbor of k. Every vertex carries a self-loop."""
    model_config = ConfigDict(frozen=True)

    round: int = Field(ge=1, description="Learning round t")
    out_neighbors: Tuple[Tuple[ModelId, ...], ...] = Field(description="N^out_k in insertion order")
    in_neighbors: Tuple[FrozenSet[ModelId], ...] = Field(description="N^in_k, derived from out_neighbors")
    dominating_set: Tuple[ModelId, ...] = Field(description="D_t, ascending")

    @classmethod
    def build(
        cls,
        round: int,
        out_neighbors: Sequence[Sequence[ModelId]],
        dominating_set: Optional[Iterable[ModelId]] = None,
    ) -> "FeedbackGraph":
        out = tuple(tuple(int(j) for j in row) for row in out_neighbors)
        incoming = [set() for _ in out]
        for k, row in enumerate(out):
            for j in row:
                incoming[j].add(k)
        graph = cls.model_construct(
            round=round,
            out_neighbors=out,
            in_neighbors=tuple(frozenset(s) for s in incoming),
            dominating_set=(),
        )
        if dominating_set is None:
            dominating_set = greedy_dominating_set(graph)
        return cls(
            round=round,
            out_neighbors=out,
            in_neighbors=graph.in_neighbors,
            dominating_set=tuple(sorted(int(d) for d in dominating_set)),
        )

    @model_validator(mode="after")
    def check_structure(self):
        size = len(self.out_neighbors)
        if len(self.in_neighbors) != size:
            raise ValueError("in- and out-neighborhoods disagree on the vertex count")
        for k, row in enumerate(self.out_neighbors):
            if k not in row:
                raise ValueError(f"vertex {k} has no self-loop")
            if len(set(row)) != len(row) or any(not 0 <= j < size for j in row):
                raise ValueError(f"out-neighborhood of vertex {k} is not a set of valid vertices")
            for j in row:
                if k not in self.in_neighbors[j]:
                    raise ValueError(f"edge ({k}, {j}) missing from the in-neighborhood of {j}")
        if self.dominating_set:
            covered = set().union(*(self.out_neighbors[d] for d in self.dominating_set))
            if len(covered) != size:
                raise ValueError("dominating set does not cover every vertex")
        return self

    @property
    def size(self) -> int:
        return len(self.out_neighbors)

    def edges(self) -> Iterable[Tuple[ModelId, ModelId]]:
        for k, row in enumerate(self.out_neighbors):
            for j in row:
                yield k, j

    def out_degrees(self) -> Tuple[int, ...]:
        return tuple(len(row) for row in self.out_neighbors)


def _floored(weights: Sequence[float]) -> np.ndarray:
    return np.maximum(np.asarray(weights, dtype=float), WEIGHT_FLOOR)


def candidate_set(
    k: ModelId,
    current_out: Sequence[ModelId],
    weights: Sequence[float],
    costs: Sequence[float],
    budget: float,
    prev_weight_bound: float = math.inf,
) -> FrozenSet[ModelId]:
    """Models that still fit next to ``current_out`` under both constraints:
    the cost budget and the previous round's neighborhood weight sum."""
    if k not in current_out:
        raise ContractViolationError(f"current out-neighborhood of {k} must contain {k}")
    used_costs = [costs[j] for j in current_out]
    used_cost = math.fsum(used_costs)
    used_weight = math.fsum(weights[j] for j in current_out)
    weight_limit = prev_weight_bound * (1.0 + WEIGHT_BOUND_RTOL)
    members = set(current_out)
    return frozenset(
        i for i in range(len(costs))
        if i not in members
        and _fits_budget(used_cost, used_costs, costs[i], budget)
        and used_weight + weights[i] <= weight_limit
    )


def _fits_budget(used_cost: float, used_costs: list, extra: float, budget: float) -> bool:
    total = used_cost + extra
    if abs(total - budget) > 1e-9 * max(1.0, budget):
        return total <= budget
    # Near the boundary, decide with the correctly rounded sum the invariant check uses.
    return math.fsum(used_costs + [extra]) <= budget


def select_candidate(
    candidates: Iterable[ModelId],
    current_out: Sequence[ModelId],
    weights: Sequence[float],
    costs: Sequence[float],
) -> ModelId:
    """Candidate with the largest weight per cumulative cost; lowest index on ties."""
    ordered = sorted(candidates)
    if not ordered:
        raise ContractViolationError("select_candidate needs at least one candidate")
    used_cost = math.fsum(costs[j] for j in current_out)
    best, best_ratio = ordered[0], -math.inf
    for i in ordered:
        ratio = weights[i] / (used_cost + costs[i])
        if ratio > best_ratio:
            best, best_ratio = i, ratio
    return best


def _out_neighborhood(k: ModelId, weights: np.ndarray, costs: np.ndarray, budget: float, bound: float) -> Tuple[ModelId, ...]:
    out = [k]
    candidates = candidate_set(k, out, weights, costs, budget, bound)
    while candidates:
        out.append(select_candidate(candidates, out, weights, costs))
        candidates = candidate_set(k, out, weights, costs, budget, bound)
    return tuple(out)


def generate_feedback_graph(
    weights: Sequence[float],
    costs: Sequence[float],
    budget: float,
    prev_graph: Optional[FeedbackGraph] = None,
) -> FeedbackGraph:
    """
    Build G_t greedily, one out-neighborhood per vertex.

    Each vertex starts with itself and keeps appending the candidate with the
    best weight-to-cost ratio until no model fits the budget and the weight
    bound. In round 1 (no previous graph) the weight bound is infinite;
    afterwards it is the current-weight sum over last round's neighborhood.
    """
    costs = np.asarray(costs, dtype=float)
    weights = _floored(weights)
    if len(weights) != len(costs):
        raise ContractViolationError(f"{len(weights)} weights but {len(costs)} costs")
    if not budget > 0:
        raise ConfigError(f"budget must be positive, got {budget}", key="budget")
    Budget(per_round=budget).check_covers(costs)
    if prev_graph is not None and prev_graph.size != len(costs):
        raise ContractViolationError("previous graph has a different vertex count")

    out_neighbors = []
    for k in range(len(costs)):
        if prev_graph is None:
            bound = math.inf
        else:
            bound = math.fsum(weights[j] for j in prev_graph.out_neighbors[k])
        out_neighbors.append(_out_neighborhood(k, weights, costs, budget, bound))

    round_index = 1 if prev_graph is None else prev_graph.round + 1
    return FeedbackGraph.build(round_index, out_neighbors)


def greedy_dominating_set(graph: FeedbackGraph) -> Tuple[ModelId, ...]:
    """Greedy set cover over out-neighborhoods: repeatedly take the vertex
    covering the most uncovered vertices (lowest index on ties)."""
    uncovered = set(range(graph.size))
    chosen = []
    while uncovered:
        best, best_gain = -1, 0
        for k, row in enumerate(graph.out_neighbors):
            gain = len(uncovered.intersection(row))
            if gain > best_gain:
                best, best_gain = k, gain
        if best < 0:
            raise ContractViolationError("graph without self-loops cannot be dominated")
        chosen.append(best)
        uncovered.difference_update(graph.out_neighbors[best])
    return tuple(sorted(chosen))


def undirected_support(graph: FeedbackGraph) -> nx.Graph:
    """Undirected graph with i ~ j (i != j) when either direction is an edge."""
    support = nx.Graph()
    support.add_nodes_from(range(graph.size))
    support.add_edges_from((k, j) for k, j in graph.edges() if k != j)
    return support


@lru_cache(maxsize=4096)
def _alpha_of(size: int, edges: FrozenSet[Tuple[int, int]]) -> int:
    support = nx.Graph()
    support.add_nodes_from(range(size))
    support.add_edges_from(edges)
    _, alpha = nx.max_weight_clique(nx.complement(support), weight=None)
    return int(alpha)


def independence_number(graph: FeedbackGraph, max_vertices: int = MAX_ALPHA_VERTICES) -> int:
    """Exact alpha(G_t): maximum independent set of the undirected support,
    computed as the maximum clique of its complement."""
    if graph.size > max_vertices:
        raise DiagnosticUnavailableError(
            f"independence number needs K <= {max_vertices}, graph has {graph.size} vertices"
        )
    edges = frozenset(tuple(sorted(edge)) for edge in undirected_support(graph).edges())
    return _alpha_of(graph.size, edges)


def neighborhood_weight_sum(graph: FeedbackGraph, weights: Sequence[float], k: ModelId) -> float:
    """W_k = sum of w_j over the out-neighborhood of k."""
    return math.fsum(weights[j] for j in graph.out_neighbors[k])


def check_graph_invariants(
    graph: FeedbackGraph,
    weights: Sequence[float],
    costs: Sequence[float],
    budget: float,
    prev_graph: Optional[FeedbackGraph] = None,
) -> None:
    """Raise ContractViolationError if G_t breaks a structural guarantee."""
    weights = _floored(weights)
    for k, row in enumerate(graph.out_neighbors):
        if k not in row:
            raise ContractViolationError(f"vertex {k} lost its self-loop", graph.round)
        cost = math.fsum(costs[j] for j in row)
        if cost > budget:
            raise ContractViolationError(f"out-neighborhood of {k} costs {cost} > budget {budget}", graph.round)
        if prev_graph is not None:
            bound = neighborhood_weight_sum(prev_graph, weights, k)
            if neighborhood_weight_sum(graph, weights, k) > bound * (1.0 + WEIGHT_BOUND_RTOL):
                raise ContractViolationError(f"out-neighborhood of {k} exceeds its weight bound", graph.round)
    covered = set()
    for d in graph.dominating_set:
        covered.update(graph.out_neighbors[d])
    if len(covered) != graph.size:
        raise ContractViolationError("dominating set does not dominate", graph.round)


def dump_graph(graph: FeedbackGraph) -> str:
    """Adjacency list text: one ``k: j1 j2 ...`` line per vertex, then ``D: ...``."""
    lines = [f"{k}: {' '.join(str(j) for j in row)}" for k, row in enumerate(graph.out_neighbors)]
    lines.append(f"D: {' '.join(str(d) for d in graph.dominating_set)}")
    return "\n".join(lines) + "\n"

"""Monte Carlo tree search over schedule states with the exact parametric
solver as the deterministic simulation step."""
from __future__ import annotations

import math
import random
from dataclasses import dataclass, field
from typing import Optional

from .costs import HardwareSpec, UKernelModel
from .minlp import MinlpModel, MinlpSolution, build_model, solve
from .tiles import Action, ScheduleState, apply_action, legal_actions


@dataclass
class MctsNode:
    state: ScheduleState
    parent: Optional["MctsNode"] = None
    action: Optional[Action] = None
    visits: int = 0
    total_reward: float = 0.0
    children: dict[Action, "MctsNode"] = field(default_factory=dict)
    untried: Optional[list[Action]] = None
    terminal: bool = False


@dataclass
class SearchResult:
    best_state: ScheduleState
    best_solution: MinlpSolution
    best_objective: float
    evaluations: int


def _evaluate(state: ScheduleState, hw: HardwareSpec, ukm: UKernelModel,
              cache: dict[str, float], solutions: dict[str, MinlpSolution]) -> float:
    key = state.key()
    if key not in cache:
        model = build_model(state.ttg, hw, ukm)
        try:
            sol = solve(model)
            cache[key] = sol.objective
            solutions[key] = sol
        except Exception:
            cache[key] = math.inf
    return cache[key]


def mcts_search(root_state: ScheduleState, iterations: int, hw: HardwareSpec,
                ukm: UKernelModel, exploration_c: float = math.sqrt(2.0),
                seed: int = 0, max_depth: Optional[int] = None,
                solve_cache: Optional[dict] = None) -> SearchResult:
    """UCT search: selection, expansion (all legal actions, deduplicated by
    state hash), deterministic analytical simulation, reward backpropagation.

    Reward is the root objective over the leaf objective, so 1.0 marks parity
    with the unfused root and larger is better.  Deterministic given the seed.
    A caller-supplied solve_cache shares simulation results across searches
    (evaluations are pure functions of the state).
    """
    if iterations < 1:
        raise ValueError("need at least one iteration")
    rng = random.Random(seed)
    if max_depth is None:
        max_depth = 2 * max(1, len(root_state.ttg.ops))

    if solve_cache is None:
        solve_cache = {}
    cache: dict[str, float] = solve_cache.setdefault("objectives", {})
    solutions: dict[str, MinlpSolution] = solve_cache.setdefault("solutions", {})
    root_objective = _evaluate(root_state, hw, ukm, cache, solutions)
    if math.isinf(root_objective):
        raise ValueError("root state is infeasible")

    root = MctsNode(root_state)
    best_key = root_state.key()
    best_obj = root_objective
    evaluations = 1

    def expandable(node: MctsNode) -> bool:
        if node.untried is None:
            if len(node.state.history) >= max_depth:
                node.untried = []
            else:
                seen = {c.state.key() for c in node.children.values()}
                acts = []
                for a in legal_actions(node.state):
                    child = apply_action(node.state, a)
                    if child.key() not in seen:
                        seen.add(child.key())
                        acts.append(a)
                node.untried = acts
            node.terminal = not node.untried and not node.children
        return bool(node.untried)

    for _ in range(iterations):
        node = root
        # Selection: descend while fully expanded.
        while not expandable(node) and node.children:
            node = _uct_pick(node, exploration_c)
        # Expansion.
        if expandable(node):
            i = rng.randrange(len(node.untried))
            action = node.untried.pop(i)
            child_state = apply_action(node.state, action)
            child = MctsNode(child_state, node, action)
            node.children[action] = child
            node = child
        # Simulation: deterministic analytical evaluation.
        obj = _evaluate(node.state, hw, ukm, cache, solutions)
        evaluations += 1
        if obj < best_obj:
            best_obj = obj
            best_key = node.state.key()
        reward = 0.0 if math.isinf(obj) else root_objective / obj
        # Backpropagation.
        while node is not None:
            node.visits += 1
            node.total_reward += reward
            node = node.parent

    best_state = _find_state(root, best_key) or root_state
    return SearchResult(best_state, solutions[best_key], best_obj, evaluations)


def _uct_pick(node: MctsNode, c: float) -> MctsNode:
    best_score = -math.inf
    best_child = None
    log_n = math.log(max(1, node.visits))
    for action in sorted(node.children, key=repr):
        child = node.children[action]
        mean = child.total_reward / child.visits if child.visits else 0.0
        explore = c * math.sqrt(log_n / child.visits) if child.visits else math.inf
        score = mean + explore
        if score > best_score:
            best_score = score
            best_child = child
    return best_child


def _find_state(root: MctsNode, key: str) -> Optional[ScheduleState]:
    stack = [root]
    while stack:
        node = stack.pop()
        if node.state.key() == key:
            return node.state
        stack.extend(node.children.values())
    return None

import json
import math
import os

import jsonschema
import numpy as np
import pytest

from movesd.agentnets import PolicyNet
from movesd.core import AgentState, StepRecord, Trajectory
from movesd.dynamics import DynamicsModel
from movesd.envsim import (FacilitySpec, GridParkConfig, candidates_for_loc,
                           generate_demonstrations, loc_coordinates,
                           ring_road_config)
from movesd.evalbench import (MarkovModel, acc_at_k, ade, build_report,
                              chain_rollout, evaluate_generation,
                              evaluate_next_loc, fde, format_table,
                              next_loc_points, policy_next_loc_probs,
                              random_walk_probs, rank_candidates, write_report)


def grid_cfg(**kw):
    base = dict(width=4, height=4,
                facilities=(FacilitySpec(loc=5, service_rate=1.0),),
                n_agents=2, max_steps=20, seed=0)
    base.update(kw)
    return GridParkConfig(**base)


def walk(locs, agent_id=0):
    states = [AgentState(loc_id=l, time_in_loc=0, start_time=0, population=1)
              for l in locs]
    return Trajectory(agent_id=agent_id, records=[
        StepRecord(state=a, action=0, constraint=None, next_state=b)
        for a, b in zip(states, states[1:])])


class TestRanking:
    def test_orders_by_probability(self):
        out = rank_candidates([4, 9, 2], {4: 0.5, 9: 0.3, 2: 0.2}, k=3)
        assert out == [4, 9, 2]

    def test_ties_break_toward_the_lower_id(self):
        out = rank_candidates([7, 3, 1], {3: 0.2, 7: 0.2, 1: 0.1}, k=2)
        assert out == [3, 7]

    def test_missing_probabilities_count_as_zero(self):
        out = rank_candidates([5, 2], {5: 0.4}, k=2)
        assert out == [5, 2]

    def test_k_must_be_positive(self):
        with pytest.raises(ValueError):
            rank_candidates([1], {1: 1.0}, k=0)


class TestAccuracy:
    def test_hit_and_miss_tally(self):
        points = [([1, 2], {1: 0.9, 2: 0.1}, 1),
                  ([1, 2], {1: 0.9, 2: 0.1}, 2)]
        acc, missing = acc_at_k(points, k=1)
        assert acc == 0.5 and missing == 0.0

    def test_truth_outside_candidates_is_a_miss(self):
        acc, missing = acc_at_k([([1, 2], {1: 1.0}, 9)], k=5)
        assert acc == 0.0 and missing == 1.0

    def test_full_recall_when_k_covers_the_candidates(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            n = int(rng.integers(1, 6))
            candidates = sorted(rng.choice(50, size=n, replace=False).tolist())
            probs = {c: float(rng.random()) for c in candidates}
            truth = candidates[int(rng.integers(0, n))]
            acc, missing = acc_at_k([(candidates, probs, truth)], k=5)
            assert acc == 1.0 and missing == 0.0

    def test_empty_points_rejected(self):
        with pytest.raises(ValueError):
            acc_at_k([], k=1)


class TestDisplacement:
    def test_hand_values_on_the_grid(self):
        cfg = grid_cfg()
        assert ade([0, 1], [0, 5], cfg) == pytest.approx(2.5)
        assert fde([0, 1], [0, 5], cfg) == pytest.approx(5.0)
        assert ade([3, 3], [3, 3], cfg) == 0.0

    def test_matches_a_brute_force_loop(self):
        cfg = grid_cfg()
        rng = np.random.default_rng(1)
        for _ in range(50):
            n = int(rng.integers(1, 30))
            a = rng.integers(0, cfg.n_locs, size=n).tolist()
            b = rng.integers(0, cfg.n_locs, size=n).tolist()
            want = sum(math.dist(loc_coordinates(cfg, x), loc_coordinates(cfg, y))
                       for x, y in zip(a, b)) / n
            assert ade(a, b, cfg) == pytest.approx(want, abs=1e-12)
            assert fde(a, b, cfg) == pytest.approx(
                math.dist(loc_coordinates(cfg, a[-1]), loc_coordinates(cfg, b[-1])))

    def test_length_mismatch_and_empty_rejected(self):
        cfg = grid_cfg()
        with pytest.raises(ValueError):
            ade([1, 2], [1], cfg)
        with pytest.raises(ValueError):
            ade([], [], cfg)
        with pytest.raises(ValueError):
            fde([], [], cfg)


class TestMarkov:
    def test_transition_frequencies(self):
        model = MarkovModel().fit([walk([0, 1, 1, 2])])
        probs = model.predict(1, [0, 1, 2, 5])
        assert probs == {0: 0.0, 1: 0.5, 2: 0.5, 5: 0.0}

    def test_unseen_source_falls_back_to_uniform(self):
        model = MarkovModel().fit([walk([0, 1])])
        probs = model.predict(9, [8, 9, 10])
        assert probs == {8: pytest.approx(1 / 3), 9: pytest.approx(1 / 3),
                         10: pytest.approx(1 / 3)}

    def test_sampling_respects_the_candidate_set(self):
        model = MarkovModel().fit([walk([0, 1, 1, 2, 0, 1])])
        rng = np.random.default_rng(2)
        draws = {model.sample_next(1, [1, 2], rng) for _ in range(100)}
        assert draws <= {1, 2}

    def test_sampling_survives_zero_candidate_mass(self):
        model = MarkovModel().fit([walk([0, 1])])
        rng = np.random.default_rng(3)
        assert model.sample_next(0, [5, 9], rng) in (5, 9)

    def test_random_walk_is_uniform(self):
        assert random_walk_probs([3, 4]) == {3: 0.5, 4: 0.5}


class TestChains:
    def test_rollout_respects_adjacency(self):
        cfg = grid_cfg()
        rng = np.random.default_rng(4)
        locs = chain_rollout(5, 30, cfg, rng)
        assert len(locs) == 30
        cur = 5
        for loc in locs:
            assert loc in candidates_for_loc(cfg, cur)
            cur = loc

    def test_markov_rollout_follows_the_fitted_chain(self):
        cfg = grid_cfg()
        model = MarkovModel().fit([walk([5, 6, 5, 6, 5, 6])])
        locs = chain_rollout(5, 10, cfg, np.random.default_rng(5), model)
        assert set(locs) <= {5, 6}


class TestPoints:
    def test_one_point_per_step(self):
        cfg = grid_cfg()
        trajs = [walk([0, 1, 2, 3]), walk([5, 5, 6], agent_id=1)]
        points = next_loc_points(trajs, cfg)
        assert len(points) == 5
        assert points[0].truth == 1 and points[0].current == 0
        assert points[-1].truth == 6

    def test_cap_subsamples_deterministically(self):
        cfg = grid_cfg()
        trajs = [walk(list(np.random.default_rng(6).integers(0, 16, size=40)))]
        a = next_loc_points(trajs, cfg, max_points=10, rng=np.random.default_rng(7))
        b = next_loc_points(trajs, cfg, max_points=10, rng=np.random.default_rng(7))
        assert len(a) == 10
        assert [p.truth for p in a] == [p.truth for p in b]


@pytest.fixture(scope="module")
def road_setup():
    cfg = ring_road_config(8, n_agents=2, max_steps=20, seed=5)
    policy = PolicyNet(cfg.n_locs, cfg.n_features, cfg.n_actions,
                       np.random.default_rng(8))
    dynamics = DynamicsModel(np.random.default_rng(9))
    train = generate_demonstrations(cfg, 2, seed=3)
    test = generate_demonstrations(cfg, 2, seed=4)
    markov = MarkovModel().fit(train)
    return cfg, policy, dynamics, markov, test


class TestNextLocEvaluation:
    def test_report_covers_all_methods(self, road_setup):
        cfg, policy, dynamics, markov, test = road_setup
        res = evaluate_next_loc(policy, dynamics, markov, test, cfg, max_points=50)
        assert res["n_points"] == 50
        for m in ("movesd", "random_walk", "markov"):
            for key in ("acc@1", "acc@3", "acc@5", "missing_candidate_rate"):
                assert 0.0 <= res[m][key] <= 1.0

    def test_acc_at_five_is_total_with_few_candidates(self, road_setup):
        cfg, policy, dynamics, markov, test = road_setup
        assert max(len(candidates_for_loc(cfg, r)) for r in range(cfg.n_locs)) <= 5
        res = evaluate_next_loc(policy, dynamics, markov, test, cfg)
        for m in ("movesd", "random_walk", "markov"):
            assert res[m]["missing_candidate_rate"] == 0.0
            assert res[m]["acc@5"] == 1.0

    def test_model_mass_lands_on_reachable_locations(self):
        cfg = grid_cfg()
        policy = PolicyNet(cfg.n_locs, cfg.n_features, cfg.n_actions,
                           np.random.default_rng(10))
        dynamics = DynamicsModel(np.random.default_rng(11))
        points = next_loc_points([walk([5, 6, 6, 10])], cfg)
        locs = np.stack([p.locs for p in points])
        feats = np.stack([p.feats for p in points])
        og = np.stack([p.og for p in points])
        dists = policy_next_loc_probs(policy, dynamics, locs, feats, og, cfg)
        for p, dist in zip(points, dists):
            assert sum(dist.values()) == pytest.approx(1.0)
            assert set(dist) <= set(candidates_for_loc(cfg, p.current))

    def test_no_points_rejected(self, road_setup):
        cfg, policy, dynamics, markov, _ = road_setup
        with pytest.raises(ValueError):
            evaluate_next_loc(policy, dynamics, markov, [], cfg)


class TestGenerationEvaluation:
    def test_schema_and_determinism(self):
        cfg = grid_cfg()
        policy = PolicyNet(cfg.n_locs, cfg.n_features, cfg.n_actions,
                           np.random.default_rng(12))
        dynamics = DynamicsModel(np.random.default_rng(13))
        markov = MarkovModel().fit(generate_demonstrations(cfg, 1, seed=6))
        kw = dict(env_config=cfg, horizon=10, n_episodes=2, seed=21)
        res1 = evaluate_generation(policy, dynamics, markov, **kw)
        res2 = evaluate_generation(policy, dynamics, markov, **kw)
        assert res1 == res2
        assert res1["horizon"] == 10
        assert res1["n_sequences"] == 2 * cfg.n_agents
        for m in ("movesd", "random_walk", "markov"):
            assert res1[m]["ade"] >= 0.0 and res1[m]["fde"] >= 0.0


class TestReports:
    def fake_results(self):
        entry = {"acc@1": 0.5, "acc@3": 0.8, "acc@5": 1.0,
                 "missing_candidate_rate": 0.0}
        return {"movesd": dict(entry), "random_walk": dict(entry),
                "markov": dict(entry), "n_points": 42}

    def schema(self):
        path = os.path.join(os.path.dirname(__file__), "..", "src", "movesd",
                            "report_schema.json")
        with open(path) as f:
            return json.load(f)

    def test_report_validates_against_the_bundled_schema(self):
        report = build_report("next-loc", self.fake_results(), meta={"seed": 1})
        jsonschema.validate(report, self.schema())

    def test_generation_report_validates_too(self):
        results = {"movesd": {"ade": 3.0, "fde": 4.0},
                   "random_walk": {"ade": 5.0, "fde": 6.0},
                   "markov": {"ade": 4.0, "fde": 5.0},
                   "horizon": 100, "n_sequences": 12}
        report = build_report("gen-1000", results)
        jsonschema.validate(report, self.schema())

    def test_unknown_task_fails_validation(self):
        report = build_report("teleport", self.fake_results())
        with pytest.raises(jsonschema.ValidationError):
            jsonschema.validate(report, self.schema())

    def test_write_report_emits_all_artifacts(self, tmp_path):
        report = build_report("next-loc", self.fake_results())
        log = [{"iteration": i, "d_loss": -1.4 + 0.01 * i, "mean_reward": 0.5,
                "surrogate_after": 0.01, "kl": 0.005, "entropy": 2.0}
               for i in range(5)]
        paths = write_report(report, str(tmp_path), training_log=log)
        for key in ("json", "table", "curves", "metrics_figure", "curves_figure"):
            assert key in paths and os.path.exists(paths[key]), key
        with open(paths["json"]) as f:
            assert json.load(f) == report
        with open(paths["curves"]) as f:
            header = f.readline().strip().split(",")
        assert header == ["iteration", "d_loss", "mean_reward",
                          "surrogate_after", "kl", "entropy"]

    def test_table_lists_methods_and_metrics(self):
        table = format_table(build_report("next-loc", self.fake_results()))
        assert "task: next-loc" in table
        for token in ("movesd", "random_walk", "markov", "acc@1", "0.5000"):
            assert token in table

    def test_figures_are_optional(self, tmp_path):
        report = build_report("next-loc", self.fake_results())
        paths = write_report(report, str(tmp_path), render_figures=False)
        assert "metrics_figure" not in paths
        assert os.path.exists(paths["json"])

"""Loss values and gradients, optimizer behavior, mining, and the loop."""

import math

import numpy as np
import pytest

from demoret import encoder as enc
from demoret import synthetic, trainer
from demoret.corpus import DatasetRegistry
from demoret.errors import ConfigError, ContractError, StateError
from demoret.feedback import ScoreCache, read_candidate_sets, score_candidate_set
from demoret.trainer import (
    TrainConfig,
    apply_update,
    batch_objective,
    init_optimizer,
    loss_inbatch,
    loss_rank,
    loss_total,
    mine_candidates,
    sample_step_candidates,
    train,
    train_step,
)


class TestLossRank:
    def test_pair_weight_from_rank_gap(self):
        # ranks 1 and 10 weight their ordered pair by 1/1 - 1/10 = 0.9; with
        # equal sims each weighted pair contributes w * ln 2
        value, _ = loss_rank(np.zeros(10), list(range(1, 11)))
        expected = sum(
            max(0.0, 1 / ri - 1 / rj) * math.log(2)
            for ri in range(1, 11)
            for rj in range(1, 11)
        )
        assert value == pytest.approx(expected, rel=1e-12)
        assert max(0.0, 1 / 1 - 1 / 10) == pytest.approx(0.9)

    def test_worked_example(self):
        value, grad = loss_rank([1.0, 0.0], [1, 2])
        assert value == pytest.approx(0.156631, abs=1e-6)
        assert value == pytest.approx(0.5 * math.log(1 + math.exp(-1.0)), abs=1e-12)

    def test_single_candidate_no_pairs(self):
        value, grad = loss_rank([0.7], [1])
        assert value == 0.0
        assert grad.tolist() == [0.0]

    def test_translation_invariance(self):
        rng = np.random.default_rng(0)
        for _ in range(10):
            sims = rng.normal(size=6)
            ranks = np.random.default_rng(1).permutation(6) + 1
            v1, _ = loss_rank(sims, ranks)
            v2, _ = loss_rank(sims + 13.7, ranks)
            assert v1 == pytest.approx(v2, rel=1e-9)

    def test_zero_only_when_ordered_with_margin(self):
        # perfectly ordered with large margins: loss tends to zero
        sims = np.array([50.0, 40.0, 30.0])
        value, _ = loss_rank(sims, [1, 2, 3])
        assert value < 1e-4
        # any misordered pair with positive weight makes it strictly positive
        value_bad, _ = loss_rank(np.array([30.0, 40.0, 50.0]), [1, 2, 3])
        assert value_bad > 1.0

    def test_monotone_decreasing_in_winner_sim(self):
        base, _ = loss_rank([1.0, 0.0], [1, 2])
        higher, _ = loss_rank([1.5, 0.0], [1, 2])
        assert higher < base

    def test_permutation_equivariance(self):
        rng = np.random.default_rng(3)
        sims = rng.normal(size=5)
        ranks = rng.permutation(5) + 1
        v1, g1 = loss_rank(sims, ranks)
        perm = rng.permutation(5)
        v2, g2 = loss_rank(sims[perm], ranks[perm])
        assert v1 == pytest.approx(v2, rel=1e-12)
        np.testing.assert_allclose(g1[perm], g2, rtol=1e-12)

    def test_invalid_ranks_rejected(self):
        with pytest.raises(ContractError):
            loss_rank([0.1, 0.2], [1, 3])

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(7)
        eps = 1e-4
        for _ in range(25):
            n = int(rng.integers(2, 10))
            sims = rng.normal(size=n)
            ranks = rng.permutation(n) + 1
            _, grad = loss_rank(sims, ranks)
            for i in range(n):
                bumped = sims.copy()
                bumped[i] += eps
                up, _ = loss_rank(bumped, ranks)
                bumped[i] -= 2 * eps
                down, _ = loss_rank(bumped, ranks)
                fd = (up - down) / (2 * eps)
                denom = max(abs(grad[i]), abs(fd), 1e-6)
                assert abs(grad[i] - fd) / denom < 1e-4


class TestLossInBatch:
    def test_worked_example(self):
        value, _ = loss_inbatch(np.array([[2.0, 0.0]]), [0])
        assert value == pytest.approx(0.126928, abs=1e-6)
        assert value == pytest.approx(math.log(1 + math.exp(-2.0)), abs=1e-12)

    def test_singleton_column(self):
        value, grad = loss_inbatch(np.array([[3.3]]), [0])
        assert value == pytest.approx(0.0, abs=1e-12)
        np.testing.assert_allclose(grad, [[0.0]], atol=1e-12)

    def test_uniform_sims_log_m(self):
        for m in (2, 5, 9):
            value, _ = loss_inbatch(np.zeros((1, m)), [0])
            assert value == pytest.approx(math.log(m), rel=1e-12)

    def test_out_of_range_positive_rejected(self):
        with pytest.raises(ContractError):
            loss_inbatch(np.zeros((1, 3)), [3])

    def test_column_swap_equivariance(self):
        rng = np.random.default_rng(4)
        sims = rng.normal(size=(2, 6))
        pos = [1, 4]
        v1, g1 = loss_inbatch(sims, pos)
        perm = rng.permutation(6)
        remapped = [int(np.where(perm == p)[0][0]) for p in pos]
        v2, g2 = loss_inbatch(sims[:, perm], remapped)
        assert v1 == pytest.approx(v2, rel=1e-12)
        np.testing.assert_allclose(g1[:, perm], g2, rtol=1e-12)

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(11)
        eps = 1e-4
        for _ in range(25):
            q, m = int(rng.integers(1, 4)), int(rng.integers(2, 8))
            sims = rng.normal(size=(q, m))
            pos = rng.integers(0, m, size=q)
            _, grad = loss_inbatch(sims, pos)
            for qi in range(q):
                for ci in range(m):
                    bumped = sims.copy()
                    bumped[qi, ci] += eps
                    up, _ = loss_inbatch(bumped, pos)
                    bumped[qi, ci] -= 2 * eps
                    down, _ = loss_inbatch(bumped, pos)
                    fd = (up - down) / (2 * eps)
                    denom = max(abs(grad[qi, ci]), abs(fd), 1e-6)
                    assert abs(grad[qi, ci] - fd) / denom < 1e-4


class TestLossTotal:
    def test_worked_mixture(self):
        assert loss_total(0.156631, 0.126928, 0.8) == pytest.approx(0.150690, abs=1e-6)

    def test_endpoints(self):
        assert loss_total(1.5, 7.0, 1.0) == 1.5
        assert loss_total(1.5, 7.0, 0.0) == 7.0


def micro_fixture(cls_tasks=1, gen_tasks=0, **kw):
    defaults = dict(
        seed=0, n_keys=3, group_train=4, group_test=1, n_aliases=1,
        filler_vocab=12, fillers_per_input=3,
    )
    defaults.update(kw)
    return synthetic.make_fixture(cls_tasks=cls_tasks, gen_tasks=gen_tasks, **defaults)


def scored_sets(fx, k=8):
    registry = fx.registry
    cache = ScoreCache()
    scorer = fx.oracle_scorer()
    from demoret.bm25 import CandidateInitializer

    init = CandidateInitializer(registry)
    sets = {}
    for task_id in registry.task_ids():
        for ex in registry.split(task_id, "train"):
            ids = init.init_candidates(ex, k)
            sets[(task_id, ex.example_id)] = score_candidate_set(scorer, ex, ids, registry, cache)
    return sets


class TestTrainStep:
    def test_zero_learning_rate_keeps_parameters(self):
        fx = micro_fixture()
        registry = fx.registry
        config = TrainConfig(learning_rate=0.0, warmup_steps=1, batch_size=4,
                             l_sampled=4, k_candidates=8, dim=8)
        params = enc.init_params(enc.build_vocab(registry), config.dim, 0)
        before = enc.checkpoint_bytes(params)
        sets = scored_sets(fx)
        batch = registry.split("syn-cls-0", "train")[:4]
        train_step(params, batch, sets, registry, config, init_optimizer(params),
                   np.random.default_rng(0))
        assert enc.checkpoint_bytes(params) == before

    def test_identical_steps_identical_deltas(self):
        fx = micro_fixture()
        registry = fx.registry
        config = TrainConfig(learning_rate=0.01, warmup_steps=1, batch_size=4,
                             l_sampled=4, k_candidates=8, dim=8)
        sets = scored_sets(fx)
        batch = registry.split("syn-cls-0", "train")[:4]
        blobs = []
        for _ in range(2):
            params = enc.init_params(enc.build_vocab(registry), config.dim, 0)
            train_step(params, batch, sets, registry, config, init_optimizer(params),
                       np.random.default_rng(42))
            blobs.append(enc.checkpoint_bytes(params))
        assert blobs[0] == blobs[1]

    def test_missing_candidate_set_names_query(self):
        fx = micro_fixture()
        registry = fx.registry
        config = TrainConfig(batch_size=2, l_sampled=2, k_candidates=8, dim=8)
        params = enc.init_params(enc.build_vocab(registry), config.dim, 0)
        batch = registry.split("syn-cls-0", "train")[:2]
        with pytest.raises(StateError, match=batch[0].example_id):
            train_step(params, batch, {}, registry, config, init_optimizer(params),
                       np.random.default_rng(0))

    def test_loss_decreases_on_separable_fixture(self):
        fx = micro_fixture()
        registry = fx.registry
        config = TrainConfig(learning_rate=0.05, warmup_steps=5, batch_size=8,
                             l_sampled=6, k_candidates=11, dim=16, seed=1)
        params = enc.init_params(enc.build_vocab(registry), config.dim, 1)
        sets = scored_sets(fx, k=11)
        opt = init_optimizer(params)
        rng = np.random.default_rng(1)
        pool = registry.split("syn-cls-0", "train")
        losses = []
        from demoret.corpus import draw_examples

        for _ in range(200):
            batch = draw_examples(pool, config.batch_size, rng)
            losses.append(train_step(params, batch, sets, registry, config, opt, rng).loss_total)
        assert np.mean(losses[-20:]) < losses[0]


class TestSampledCandidates:
    def test_all_taken_when_pool_small(self):
        fx = micro_fixture()
        registry = fx.registry
        sets = scored_sets(fx, k=3)
        batch = registry.split("syn-cls-0", "train")[:2]
        sampled = sample_step_candidates(batch, sets, registry, 8, np.random.default_rng(0))
        for ex in batch:
            assert len(sampled[ex.example_id]) == 3

    def test_ranks_recomputed_over_draw(self):
        fx = micro_fixture()
        registry = fx.registry
        sets = scored_sets(fx, k=8)
        batch = registry.split("syn-cls-0", "train")[:1]
        sampled = sample_step_candidates(batch, sets, registry, 4, np.random.default_rng(0))
        ranks = [r for _, r in sampled[batch[0].example_id]]
        assert sorted(ranks) == [1, 2, 3, 4]


class TestOptimizer:
    def test_warmup_scales_first_steps(self):
        fx = micro_fixture()
        registry = fx.registry
        config = TrainConfig(learning_rate=1.0, warmup_steps=10, dim=4)
        params = enc.init_params(enc.build_vocab(registry), 4, 0)
        state = init_optimizer(params)
        grads = {k: np.ones_like(v) for k, v in (
            ("query_embeddings", params.query_tower.embeddings),
            ("query_projection", params.query_tower.projection),
            ("demo_embeddings", params.demo_tower.embeddings),
            ("demo_projection", params.demo_tower.projection),
        )}
        before = params.query_tower.embeddings.copy()
        apply_update(params, grads, state, config)
        delta = np.abs(params.query_tower.embeddings - before).max()
        # first warmup step applies lr/10
        assert delta == pytest.approx(0.1, rel=1e-6)

    def test_weight_decay_shrinks_parameters(self):
        fx = micro_fixture()
        registry = fx.registry
        config = TrainConfig(learning_rate=0.1, warmup_steps=1, weight_decay=0.5, dim=4)
        params = enc.init_params(enc.build_vocab(registry), 4, 0)
        params.query_tower.embeddings[:] = 1.0
        state = init_optimizer(params)
        grads = {k: np.zeros_like(v) for k, v in (
            ("query_embeddings", params.query_tower.embeddings),
            ("query_projection", params.query_tower.projection),
            ("demo_embeddings", params.demo_tower.embeddings),
            ("demo_projection", params.demo_tower.projection),
        )}
        apply_update(params, grads, state, config)
        assert np.all(params.query_tower.embeddings < 1.0)


class TestMineCandidates:
    def test_matches_brute_force_similarity(self):
        fx = micro_fixture(n_keys=5, group_train=8)
        registry = fx.registry
        params = enc.init_params(enc.build_vocab(registry), 8, 3)
        spec = registry.task("syn-cls-0")
        split = registry.split("syn-cls-0", "train")
        mined = mine_candidates(params, registry, "syn-cls-0", 10)
        for qi, query in enumerate(split):
            sims = []
            for ci, cand in enumerate(split):
                if ci == qi:
                    continue
                sims.append((enc.similarity(params, query, cand, spec), ci))
            sims.sort(key=lambda t: (-t[0], t[1]))
            expected = [split[ci].example_id for _, ci in sims[:10]]
            assert mined[query.example_id] == expected

    def test_k_capped_at_pool_minus_self(self):
        fx = micro_fixture()
        registry = fx.registry
        params = enc.init_params(enc.build_vocab(registry), 8, 3)
        mined = mine_candidates(params, registry, "syn-cls-0", 500)
        split = registry.split("syn-cls-0", "train")
        for query in split:
            assert len(mined[query.example_id]) == len(split) - 1
            assert query.example_id not in mined[query.example_id]


class TestTrainLoop:
    def make_config(self, **kw):
        defaults = dict(learning_rate=0.02, warmup_steps=5, batch_size=8,
                        l_sampled=4, k_candidates=8, iterations=1,
                        epochs_initial=2, epochs_per_iteration=1, seed=3, dim=8)
        defaults.update(kw)
        return TrainConfig(**defaults)

    def test_zero_iterations_single_phase(self, tmp_path):
        fx = micro_fixture()
        params, report = train(fx.registry, fx.oracle_scorer(),
                               self.make_config(iterations=0), run_dir=tmp_path)
        assert (tmp_path / "checkpoint.iter0.udr").exists()
        assert not (tmp_path / "checkpoint.iter1.udr").exists()
        assert (tmp_path / "candidates.iter0.jsonl").exists()
        assert report.mining == []

    def test_artifacts_per_iteration(self, tmp_path):
        fx = micro_fixture()
        train(fx.registry, fx.oracle_scorer(), self.make_config(), run_dir=tmp_path)
        for name in ("config.json", "report.json", "candidates.iter0.jsonl",
                     "candidates.iter1.jsonl", "checkpoint.iter0.udr",
                     "checkpoint.iter1.udr"):
            assert (tmp_path / name).exists(), name

    def test_seeded_run_reproducible(self, tmp_path):
        fx1 = micro_fixture()
        fx2 = micro_fixture()
        cfg = self.make_config()
        p1, _ = train(fx1.registry, fx1.oracle_scorer(), cfg, run_dir=tmp_path / "a")
        p2, _ = train(fx2.registry, fx2.oracle_scorer(), cfg, run_dir=tmp_path / "b")
        assert enc.checkpoint_bytes(p1) == enc.checkpoint_bytes(p2)
        assert (tmp_path / "a/checkpoint.iter1.udr").read_bytes() == (
            tmp_path / "b/checkpoint.iter1.udr"
        ).read_bytes()

    def test_mining_replaces_pools(self, tmp_path):
        fx = micro_fixture()
        train(fx.registry, fx.oracle_scorer(), self.make_config(), run_dir=tmp_path)
        sets0 = {c.query_id: c for c in read_candidate_sets(tmp_path / "candidates.iter0.jsonl")}
        sets1 = {c.query_id: c for c in read_candidate_sets(tmp_path / "candidates.iter1.jsonl")}
        assert set(sets0) == set(sets1)
        assert all(c.iteration == 1 for c in sets1.values())
        for qid, cs in sets1.items():
            assert len(cs.entries) == len(sets0[qid].entries)

    def test_losses_finite_and_nonnegative(self, tmp_path):
        fx = micro_fixture()
        _, report = train(fx.registry, fx.oracle_scorer(), self.make_config())
        for step in report.steps:
            assert math.isfinite(step.loss_total)
            assert step.loss_rank >= 0.0
            assert step.loss_ib >= 0.0

    def test_subsample_cap_respected(self, tmp_path):
        fx = micro_fixture(group_train=6)
        cfg = self.make_config(max_train_per_task=8, k_candidates=7, l_sampled=4)
        train(fx.registry, fx.oracle_scorer(), cfg, run_dir=tmp_path)
        sets = read_candidate_sets(tmp_path / "candidates.iter0.jsonl")
        assert len(sets) == 8  # capped from 18 train examples

    def test_empty_registry_rejected(self):
        with pytest.raises(ConfigError):
            train(DatasetRegistry(), micro_fixture().oracle_scorer(), self.make_config())


class TestEndToEndGradient:
    def test_full_objective_matches_finite_differences(self):
        # micro-batch: 2 queries x 3 candidates through the whole encoder
        fx = micro_fixture()
        registry = fx.registry
        config = TrainConfig(batch_size=2, l_sampled=3, k_candidates=8, dim=4,
                             loss_weight=0.8)
        params = enc.init_params(enc.build_vocab(registry), config.dim, 5)
        sets = scored_sets(fx)
        batch = registry.split("syn-cls-0", "train")[:2]
        sampled = sample_step_candidates(batch, sets, registry, 3, np.random.default_rng(2))
        total, _, _, grads = batch_objective(params, registry, batch, sampled, config)

        arrays = {
            "query_embeddings": params.query_tower.embeddings,
            "query_projection": params.query_tower.projection,
            "demo_embeddings": params.demo_tower.embeddings,
            "demo_projection": params.demo_tower.projection,
        }
        eps = 1e-5
        rng = np.random.default_rng(8)
        for name, matrix in arrays.items():
            for fi in rng.integers(0, matrix.size, size=12):
                orig = matrix.flat[fi]
                matrix.flat[fi] = orig + eps
                up, _, _, _ = batch_objective(params, registry, batch, sampled, config)
                matrix.flat[fi] = orig - eps
                down, _, _, _ = batch_objective(params, registry, batch, sampled, config)
                matrix.flat[fi] = orig
                fd = (up - down) / (2 * eps)
                got = grads[name].flat[fi]
                denom = max(abs(got), abs(fd), 1e-6)
                assert abs(got - fd) / denom < 1e-4, (name, fi)

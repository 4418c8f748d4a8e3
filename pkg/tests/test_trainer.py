import math

import numpy as np
import pytest
import torch

import cgrl.trainer as T
from cgrl.errors import DivergenceError, ParameterError
from cgrl.graph_data import make_synthetic
from cgrl.objectives import cross_entropy, l2_penalty
from cgrl.trainer import (
    AdvConfig,
    TrainConfig,
    ablate,
    accuracy,
    build_model,
    compute_losses,
    embeddings,
    evaluate,
    export_embeddings,
    hyperparam_sweep,
    load_model,
    lr_factor,
    noise_sweep,
    prepare_graph,
    run_trials,
    sample_step_noise,
    save_model,
    train,
)

from conftest import total_loss_gradient_errors

TINY = dict(hidden_dim=8, num_heads=2, walk_len=2, num_walks=2, warmup_epochs=2)


def tiny(**kw) -> TrainConfig:
    return TrainConfig(**{**TINY, "epochs": 3, **kw})


@pytest.fixture(scope="module")
def blocks():
    return make_synthetic(60, 3, 0.3, 0.02, 6, seed=0)


class TestConfig:
    def test_round_trip_uses_lambda_key(self):
        cfg = TrainConfig(lam=3e-4, adv=AdvConfig(epsilon=0.1))
        d = cfg.to_dict()
        assert d["lambda"] == 3e-4 and "lam" not in d
        assert TrainConfig.from_dict(d) == cfg

    def test_nested_adv_dict(self):
        assert TrainConfig.from_dict({"adv": {"epsilon": 0.2, "steps": 1, "step_size": 0.0}}).adv.steps == 1

    def test_unknown_field(self):
        with pytest.raises(ParameterError, match="gamma_typo"):
            TrainConfig.from_dict({"gamma_typo": 1})

    @pytest.mark.parametrize("bad", [{"alpha": 1.2}, {"tau_cl": 0}, {"mask_init_rate": 1.0}, {"schedule": "step"},
                                     {"adv": {"epsilon": 0}}, {"dtype": "float16"}, {"beta": -1}])
    def test_invalid(self, bad):
        with pytest.raises(ParameterError):
            TrainConfig.from_dict(bad)

    def test_replace_accepts_lam(self):
        assert TrainConfig().replace(lam=0.5, seed=3).lam == 0.5

    def test_effective_beta(self):
        assert TrainConfig(beta=0.7, use_ib=False).effective_beta == 0.0


class TestSchedule:
    def test_warmup_then_cosine(self):
        assert lr_factor(0, 300, 100) == pytest.approx(0.01)
        assert lr_factor(99, 300, 100) == 1.0
        assert lr_factor(100, 300, 100) == 1.0
        assert lr_factor(200, 300, 100) == pytest.approx(0.5)
        assert lr_factor(300, 300, 100) == pytest.approx(0.0, abs=1e-15)

    def test_constant(self):
        assert {lr_factor(e, 10, 3, "constant") for e in range(10)} == {1.0}


class TestAccuracy:
    def test_hand_count(self):
        logits = torch.tensor([[2.0, 1.0], [0.0, 3.0], [5.0, -1.0], [0.1, 0.2]])
        labels = [0, 0, 0, 1]
        assert accuracy(logits, labels, [0, 1, 2, 3]) == 0.75
        assert accuracy(logits, labels, [1]) == 0.0

    def test_empty(self):
        with pytest.raises(ParameterError):
            accuracy(torch.zeros(2, 2), [0, 0], [])

    def test_evaluate_against_own_and_shifted_predictions(self, blocks):
        model, _ = train(tiny(epochs=5), blocks)
        data = prepare_graph(blocks, model.config)
        pred = T.clean_logits(model, data).argmax(1).numpy()
        everyone = np.arange(blocks.num_nodes)
        assert evaluate(model, blocks.replace(labels=pred), everyone) == 1.0
        assert evaluate(model, blocks.replace(labels=(pred + 1) % 3), everyone) == 0.0

    def test_evaluate_empty_split(self, blocks):
        model = build_model(tiny(), blocks.feat_dim, blocks.num_classes)
        with pytest.raises(ParameterError):
            evaluate(model, blocks, [])
        with pytest.raises(ParameterError):
            evaluate(model, blocks, "holdout")


class TestTrainBasics:
    def test_zero_epochs_on_featureless_graph_is_chance(self, blocks):
        # identical inputs give identical predictions, so accuracy on a balanced label set is 1/C
        g = blocks.replace(features=np.zeros_like(blocks.features))
        model, metrics = train(tiny(epochs=0), g)
        assert metrics.per_epoch == []
        assert evaluate(model, g, np.arange(g.num_nodes)) == pytest.approx(1 / 3, abs=1e-12)

    def test_empty_splits_rejected(self, six_nodes):
        with pytest.raises(ParameterError, match="training"):
            train(tiny(), six_nodes.replace(splits={"train": [], "val": [1], "test": [2]}))
        with pytest.raises(ParameterError, match="validation"):
            train(tiny(), six_nodes.replace(splits={"train": [0], "val": [], "test": [2]}))

    def test_determinism(self, blocks):
        _, a = train(tiny(epochs=6, seed=3), blocks)
        m, b = train(tiny(epochs=6, seed=3), blocks)
        assert a.loss_trace() == b.loss_trace()
        assert a.per_epoch == b.per_epoch and a.final == b.final
        _, c = train(tiny(epochs=6, seed=4), blocks)
        assert c.loss_trace() != a.loss_trace()

    def test_default_config_on_six_nodes(self, six_nodes):
        _, metrics = train(TrainConfig(epochs=50), six_nodes)
        trace = metrics.loss_trace()
        assert all(math.isfinite(v) for row in metrics.per_epoch for v in row.values())
        assert trace[49] < trace[0]

    def test_metrics_rows(self, six_nodes):
        _, metrics = train(tiny(epochs=2), six_nodes)
        assert [r["epoch"] for r in metrics.per_epoch] == [1, 2]
        assert set(metrics.per_epoch[0]) == {"epoch", "cls", "cls_nd", "cls_ed", "mi_nd", "mi_ed", "adv", "recon",
                                             "l2", "total", "val_acc"}
        assert {"test_acc", "best_val_acc", "best_val_epoch"} <= set(metrics.final)
        assert metrics.to_json()["config"]["lambda"] == 1e-4

    def test_divergence_is_reported(self, six_nodes, monkeypatch):
        monkeypatch.setattr(T, "recon_loss", lambda *a: torch.tensor(float("nan")))
        with pytest.raises(DivergenceError) as info:
            train(tiny(), six_nodes)
        assert info.value.component == "recon" and info.value.epoch == 1


def step(cfg, g, seed=0, **kw):
    data = prepare_graph(g, cfg)
    model = build_model(cfg, data.x.shape[1], g.num_classes)
    gen = torch.Generator().manual_seed(seed)
    noise = sample_step_noise(model, data, gen, np.random.default_rng(seed))
    parts, bundle = compute_losses(model, data, noise, **kw)
    return model, data, parts, bundle


class TestComponents:
    def test_every_parameter_receives_gradient(self, six_nodes):
        model, _, parts, _ = step(TrainConfig(hidden_dim=8, num_heads=2), six_nodes)
        parts.total.backward()
        dead = [n for n, p in model.named_parameters() if p.grad is None or not torch.any(p.grad != 0)]
        assert dead == []

    def test_logit_gradients_are_nonzero(self, six_nodes):
        cfg = TrainConfig(hidden_dim=8, num_heads=2, dtype="float64")
        data = prepare_graph(six_nodes, cfg)
        n, e = data.s.num_nodes, data.s.num_edges
        shift = {"node": [torch.zeros(n, dtype=torch.float64, requires_grad=True) for _ in range(2)],
                 "edge": [torch.zeros(e, dtype=torch.float64, requires_grad=True) for _ in range(2)]}
        _, _, parts, _ = step(cfg, six_nodes, logit_shift=shift)
        parts.total.backward()
        for t in shift["node"] + shift["edge"]:
            assert t.grad is not None and torch.any(t.grad != 0)

    @pytest.mark.parametrize("kind", ["gat", "gcn"])
    def test_total_loss_gradient_matches_finite_differences(self, kind):
        errors = total_loss_gradient_errors(kind)
        assert max(errors.values()) < 1e-4, max(errors.items(), key=lambda kv: kv[1])

    def test_disabled_views_leave_only_their_zeros(self, six_nodes):
        _, _, parts, bundle = step(tiny(use_nd=False), six_nodes)
        assert parts.cls_nd.item() == 0.0 and parts.mi_nd.item() == 0.0
        assert torch.equal(bundle.E_ND, bundle.E)
        assert parts.cls_ed.item() > 0 and parts.adv.item() != 0.0

    def test_beta_zero_skips_mi(self, six_nodes):
        _, _, parts, _ = step(tiny(beta=0.0), six_nodes)
        assert parts.mi_nd.item() == 0.0 and parts.mi_ed.item() == 0.0

    def test_no_adversary_when_both_views_off(self, six_nodes):
        _, _, parts, bundle = step(tiny(use_nd=False, use_ed=False), six_nodes)
        assert bundle.E_adv is None and parts.adv.item() == 0.0 and parts.recon.item() == 0.0

    def test_everything_off_is_plain_supervised_training(self, blocks):
        cfg = tiny(epochs=8, use_nd=False, use_ed=False, use_ib=False, gamma=0.0, recon_weight=0.0, seed=2)
        _, metrics = train(cfg, blocks)

        data = prepare_graph(blocks, cfg)
        model = build_model(cfg, data.x.shape[1], blocks.num_classes)
        opt = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate)
        sched = torch.optim.lr_scheduler.LambdaLR(opt, lambda ep: lr_factor(ep, cfg.epochs, cfg.warmup_epochs))
        expected = []
        for _ in range(cfg.epochs):
            model.train()
            enc_params = list(model.encoder.parameters()) + list(model.head.parameters())
            loss = cross_entropy(model.logits(model.encoder(data.x, data.s)), data.labels, data.idx["train"]) \
                + cfg.lam * l2_penalty(enc_params)
            opt.zero_grad()
            loss.backward()
            opt.step()
            sched.step()
            expected.append(float(loss.detach()))
        assert metrics.loss_trace() == expected


class TestPersistence:
    def test_save_load(self, blocks, tmp_path):
        model, _ = train(tiny(), blocks)
        back = load_model(save_model(model, tmp_path / "m.pt"))
        assert torch.equal(embeddings(back, blocks), embeddings(model, blocks))
        assert evaluate(back, blocks) == evaluate(model, blocks)

    def test_export_tsv(self, six_nodes, tmp_path):
        model, _ = train(tiny(epochs=1), six_nodes)
        out = export_embeddings(model, six_nodes, tmp_path / "emb.tsv")
        text = out.read_text()
        assert text.endswith("\n") and "\r" not in text
        rows = [line.split("\t") for line in text.splitlines()]
        assert len(rows) == 6 and {len(r) for r in rows} == {2 + 8}
        assert [int(r[0]) for r in rows] == list(range(6))
        assert [int(r[1]) for r in rows] == six_nodes.labels.tolist()
        parsed = torch.tensor([[float(v) for v in r[2:]] for r in rows])
        torch.testing.assert_close(parsed, embeddings(model, six_nodes), rtol=0, atol=0)

    def test_export_to_missing_directory(self, six_nodes, tmp_path):
        model = build_model(tiny(), six_nodes.feat_dim, 2)
        with pytest.raises(IOError):
            export_embeddings(model, six_nodes, tmp_path / "nope" / "emb.tsv")


class TestDrivers:
    def test_single_cell_ablation(self, six_nodes):
        rows = ablate(tiny(epochs=1), six_nodes, flags=[(True, False, True)], seeds=[0])
        assert len(rows) == 1
        assert rows[0]["use_nd"] and not rows[0]["use_ed"] and rows[0]["std"] == 0.0
        assert rows[0]["accs"] == [rows[0]["mean"]]

    def test_full_grid_has_eight_rows(self, six_nodes):
        rows = ablate(tiny(epochs=1), six_nodes, seeds=[0])
        assert len({(r["use_nd"], r["use_ed"], r["use_ib"]) for r in rows}) == 8

    def test_one_by_one_surface(self, six_nodes):
        out = hyperparam_sweep(tiny(epochs=1), six_nodes, [0.5], [0.5], seeds=[0, 1])
        assert len(out["cells"]) == 1 and len(out["cells"][0]["accs"]) == 2

    def test_noise_sweep_zero_rate_equal_betas_are_identical(self, six_nodes):
        out = noise_sweep(tiny(epochs=2, beta=0.3), six_nodes, [0.0], seeds=[0, 1], control_beta=0.3)
        assert out["curves"]["beta"] == out["curves"]["control"]
        assert [p["rate"] for p in out["curves"]["beta"]] == [0.0]

    def test_noise_sweep_rejects_bad_rate(self, six_nodes):
        with pytest.raises(ParameterError):
            noise_sweep(tiny(), six_nodes, [1.5], seeds=[0])

    def test_worker_processes_match_serial(self, six_nodes):
        tasks = [(tiny(epochs=2, seed=s), six_nodes) for s in (0, 1)]
        assert run_trials(tasks, jobs=2) == run_trials(tasks, jobs=1)

    def test_training_is_independent_of_prior_global_rng_state(self, six_nodes):
        torch.manual_seed(99)
        torch.rand(10)
        a = run_trials([(tiny(epochs=2), six_nodes)])
        torch.manual_seed(7)
        assert run_trials([(tiny(epochs=2), six_nodes)]) == a


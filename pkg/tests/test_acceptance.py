"""Acceptance gate: every release criterion with its pinned tolerance.

Run with `pytest tests/test_acceptance.py -v -s` to see one pass/fail line
per criterion.  Criteria 7 and 8 share one pair of real training runs
(2,000 optimizer steps per objective on 1,024 generated scenes) and
dominate the runtime; everything else completes in seconds.

Reference numbers from the committed baseline run live in
tests/data/toy_baseline.json; the thresholds asserted here were frozen
against that run.
"""

import json
import math
from contextlib import contextmanager
from pathlib import Path

import numpy as np
import pytest
import torch

from ddit import toydata
from ddit.conditioning import RFM_TIME_SCALE, CaptionEncoding
from ddit.dit_core import DualStreamDiT, ModelConfig, count_parameters, patch_flatten, unpatchify
from ddit.latentcodec import CodecConfig, make_codec
from ddit.metrics import conditioning_probe, mask_agreement, segment_toy, ssim
from ddit.objectives import (
    TrainBatch,
    ddpm_loss,
    make_linear_schedule,
    min_snr_weight,
    min_snr_weight_from_snr,
    rfm_loss,
)
from ddit.rng import generator
from ddit.rope import RopeTable, apply_rope_1d, apply_rope_2d
from ddit.runconfig import build_settings
from ddit.samplers import GuidanceConfig, SamplerConfig, cfg_combine, sample_ddpm, sample_rfm_euler
from ddit.trainer import (
    Checkpoint,
    TrainConfig,
    apply_cond_dropout,
    clip_gradients,
    cosine_lr,
    ema_update,
    read_loss_log,
    smoothed_loss_at,
    train,
)

from conftest import assert_states_equal
from helpers import (
    assert_gradients_match,
    finite_difference_check,
    grad_or_zeros,
    make_batch,
    perturb_parameters,
)

GRAD_CHECK_CONFIG = ModelConfig(
    hidden=16, depth=2, heads=2, patch=2, latent_channels=3,
    text_dim=8, text_len_max=4, vocab_size=16, freq_dim=16,
)


@contextmanager
def criterion(num: int, title: str):
    try:
        yield
    except BaseException:
        print(f"[criterion {num:2d}] FAIL {title}")
        raise
    print(f"[criterion {num:2d}] PASS {title}")


# -- criteria 7 and 8 share these runs ------------------------------------

@pytest.fixture(scope="session")
def toy_runs(tmp_path_factory):
    root = tmp_path_factory.mktemp("acceptance")
    data_dir = root / "data"
    toydata.write_dataset(1024, seed=7, out_dir=data_dir, size=32)
    settings = build_settings("toy")
    runs = {"data": data_dir, "settings": settings}
    for objective in ("ddpm", "rfm"):
        cfg = TrainConfig(**{**settings.train.__dict__, "objective": objective, "seed": 0})
        out = root / f"run_{objective}"
        train(cfg, settings.model, settings.codec, data_dir, out)
        runs[objective] = {"out": out, "train_cfg": cfg}
    return runs


def test_criterion_01_parameter_count():
    with criterion(1, "parameter count: closed form matches the full-scale profile and enumeration"):
        profile = build_settings("paper-profile").model
        d = profile.hidden
        assert 36 * d * d == 47_775_744
        assert profile.depth * 36 * d * d == 1_337_720_832
        total = count_parameters(profile)
        assert 1.33e9 <= total <= 1.36e9, f"profile count {total}"

        toy = build_settings("toy").model
        torch.manual_seed(0)
        assert sum(p.numel() for p in DualStreamDiT(toy).parameters()) == count_parameters(toy)
        torch.manual_seed(0)
        tiny = GRAD_CHECK_CONFIG
        assert sum(p.numel() for p in DualStreamDiT(tiny).parameters()) == count_parameters(tiny)


def test_criterion_02_gradient_correctness():
    with criterion(2, "analytic gradients match central finite differences (rel < 1e-4)"):
        sched = make_linear_schedule(100)
        for objective in ("ddpm", "rfm"):
            torch.manual_seed(1)
            model = DualStreamDiT(GRAD_CHECK_CONFIG).double()
            perturb_parameters(model, scale=0.02, seed=2)
            batch = make_batch(batch=2, channels=3, side=8, caption_len=4,
                               dtype=torch.float64, seed=3)
            if objective == "ddpm":
                loss_fn = lambda: ddpm_loss(model, batch, sched, seed=4, step=1).loss  # noqa: E731
            else:
                loss_fn = lambda: rfm_loss(model, batch, seed=4, step=1).loss  # noqa: E731
            results = finite_difference_check(model, loss_fn, fraction=0.01, h=1e-4, seed=5)
            worst = assert_gradients_match(results, rtol=1e-4)
            print(f"    {objective}: {len(results)} sampled entries, worst rel err {worst:.2e}")


def test_criterion_03_identity_at_init():
    with criterion(3, "fresh model is the zero function; initial weighted loss matches mean w(t)"):
        torch.manual_seed(2)
        model = DualStreamDiT(GRAD_CHECK_CONFIG)
        for seed in range(100):
            batch = make_batch(batch=1, channels=3, side=8, seed=seed)
            enc = model.encode_caption(batch.caption_tokens)
            out = model(batch.z0, batch.z_cond, torch.tensor([500.0]), enc, batch.modality)
            assert torch.equal(out, torch.zeros_like(out))

        sched = make_linear_schedule(1000)
        b, c, s = 512, 3, 8  # 98304 noise elements
        batch = TrainBatch(
            z0=torch.zeros(b, c, s, s), z_cond=torch.zeros(b, c, s, s),
            caption_tokens=torch.zeros(b, 4, dtype=torch.long),
            modality=torch.zeros(b, dtype=torch.long),
            sample_ids=tuple(range(b)),
        )
        report = ddpm_loss(model, batch, sched, seed=6, step=1)
        expected = float(min_snr_weight(torch.arange(1, 1001), sched).mean())
        assert abs(float(report.loss.detach()) - expected) <= 0.05 * expected


def test_criterion_04_rope_suite():
    with criterion(4, "rotary embeddings: isometry, origin identity, shift invariance, composition"):
        table_1d = RopeTable(d_rot=16)
        table_2d = RopeTable(d_rot=8)
        gen = torch.Generator().manual_seed(3)
        for _ in range(1000):
            x = torch.randn(1, 1, 16, generator=gen, dtype=torch.float64)
            pos = float(torch.randint(0, 256, (1,), generator=gen))

            rotated = apply_rope_1d(x, torch.tensor([pos]).double(), table_1d)
            assert abs(float(rotated.norm() - x.norm())) <= 1e-6

            assert torch.equal(apply_rope_1d(x, torch.zeros(1).double(), table_1d), x)
            assert torch.equal(
                apply_rope_2d(x, torch.zeros(1, 2).double(), table_2d), x
            )

            q = torch.randn(1, 1, 16, generator=gen, dtype=torch.float64)
            k = torch.randn(1, 1, 16, generator=gen, dtype=torch.float64)
            r1, c1, r2, c2 = torch.randint(0, 64, (4,), generator=gen).tolist()
            shift_r, shift_c = torch.randint(0, 32, (2,), generator=gen).tolist()
            dot_a = (
                apply_rope_2d(q, torch.tensor([[r1, c1]]).double(), table_2d)
                * apply_rope_2d(k, torch.tensor([[r2, c2]]).double(), table_2d)
            ).sum()
            dot_b = (
                apply_rope_2d(q, torch.tensor([[r1 + shift_r, c1 + shift_c]]).double(), table_2d)
                * apply_rope_2d(k, torch.tensor([[r2 + shift_r, c2 + shift_c]]).double(), table_2d)
            ).sum()
            assert abs(float(dot_a - dot_b)) <= 1e-5

            pos_a = float(torch.randint(0, 64, (1,), generator=gen))
            pos_b = float(torch.randint(0, 64, (1,), generator=gen))
            twice = apply_rope_1d(
                apply_rope_1d(x, torch.tensor([pos_a]).double(), table_1d),
                torch.tensor([pos_b]).double(), table_1d,
            )
            once = apply_rope_1d(x, torch.tensor([pos_a + pos_b]).double(), table_1d)
            assert (twice - once).abs().max() <= 1e-6


class _FnModel:
    def __init__(self, fn):
        self.fn = fn

    def encode_caption(self, tokens):
        return CaptionEncoding(sequence=torch.zeros(1, 2, 4), pooled=torch.zeros(1, 4))

    def __call__(self, z_t, z_c, t, caption, modality):
        return self.fn(z_t, t, caption)


def _null(batch=1, dim=4):
    return CaptionEncoding(sequence=torch.zeros(batch, 2, dim), pooled=torch.zeros(batch, dim))


def test_criterion_05_sampler_oracles():
    with criterion(5, "sampler oracles: exact Euler limits, first-order convergence, guidance identities"):
        # constant velocity is integrated exactly for any step count
        target = torch.full((1, 2, 4, 4), 1.5, dtype=torch.float64)
        for steps in (1, 3, 10, 100, 997):
            cfg = SamplerConfig(kind="rfm_euler", steps=steps, seed=4)
            z0 = torch.randn(target.shape, generator=generator(cfg.seed, "init"),
                             dtype=torch.float64)
            model = _FnModel(lambda z, t, cap: target - z0)
            out = sample_rfm_euler(model, torch.zeros_like(target), _null(),
                                   torch.tensor([0]), GuidanceConfig(1.0, _null()), cfg)
            assert (out - target).abs().max() <= 1e-6

        # v = z compounds to e * z0
        cfg = SamplerConfig(kind="rfm_euler", steps=1000, seed=5)
        z0 = torch.randn(1, 2, 4, 4, generator=generator(cfg.seed, "init"), dtype=torch.float64)
        out = sample_rfm_euler(_FnModel(lambda z, t, cap: z), torch.zeros_like(z0),
                               _null(), torch.tensor([0]), GuidanceConfig(1.0, _null()), cfg)
        assert float(((out - math.e * z0).abs() / (math.e * z0.abs())).max()) <= 0.002

        # first-order convergence on a smooth field
        def field(z, t_scaled, cap):
            t = t_scaled.mean() / RFM_TIME_SCALE
            return torch.sin(3.0 * t) * z + torch.cos(2.0 * t)

        def run(steps):
            c = SamplerConfig(kind="rfm_euler", steps=steps, seed=6)
            return sample_rfm_euler(_FnModel(field), torch.zeros(1, 1, 2, 2), _null(),
                                    torch.tensor([0]), GuidanceConfig(1.0, _null()), c)

        reference = run(4096)
        ns = [8, 16, 32, 64, 128, 256, 512]
        errs = [float((run(n) - reference).abs().max()) for n in ns]
        slope = float(np.polyfit(np.log(ns), np.log(errs), 1)[0])
        assert -1.2 <= slope <= -0.8, f"slope {slope}"
        print(f"    convergence slope {slope:.3f}")

        # guidance identities: the unused branch cannot influence the output
        sched = make_linear_schedule(100)
        model = _FnModel(lambda z, t, cap: 0.1 * z + cap.pooled.mean())
        z_c = torch.zeros(1, 2, 4, 4)
        real = CaptionEncoding(sequence=torch.ones(1, 2, 4), pooled=torch.ones(1, 4))
        cfg = SamplerConfig(kind="ddim", steps=10, seed=7)
        a = sample_ddpm(model, z_c, real, torch.tensor([0]),
                        GuidanceConfig(1.0, _null()), cfg, sched)
        b = sample_ddpm(model, z_c, real, torch.tensor([0]),
                        GuidanceConfig(1.0, CaptionEncoding(
                            sequence=torch.full((1, 2, 4), 5.0),
                            pooled=torch.full((1, 4), 5.0))), cfg, sched)
        assert torch.equal(a, b)
        c_out = sample_ddpm(model, z_c, real, torch.tensor([0]),
                            GuidanceConfig(0.0, _null()), cfg, sched)
        d_out = sample_ddpm(model, z_c, CaptionEncoding(
            sequence=-torch.ones(1, 2, 4), pooled=-torch.ones(1, 4)),
            torch.tensor([0]), GuidanceConfig(0.0, _null()), cfg, sched)
        assert torch.equal(c_out, d_out)
        assert cfg_combine(a, b, 1.0) is b and cfg_combine(a, b, 0.0) is a

        # determinism by seed for every sampler kind
        for kind in ("ddim", "ddpm_ancestral"):
            cfg = SamplerConfig(kind=kind, steps=20, seed=8)
            runs = [
                sample_ddpm(model, z_c, real, torch.tensor([0]),
                            GuidanceConfig(3.0, _null()), cfg, sched)
                for _ in range(2)
            ]
            assert torch.equal(runs[0], runs[1])
        cfg = SamplerConfig(kind="rfm_euler", steps=20, seed=8)
        runs = [
            sample_rfm_euler(model, z_c, real, torch.tensor([0]),
                             GuidanceConfig(3.0, _null()), cfg)
            for _ in range(2)
        ]
        assert torch.equal(runs[0], runs[1])


def test_criterion_06_codec_and_layout_roundtrips():
    with criterion(6, "codec and patch-layout roundtrips at their tolerances"):
        codec = make_codec(CodecConfig(kind="haar", levels=2, scaling=1.0))
        gen = torch.Generator().manual_seed(9)
        for _ in range(20):
            x = torch.randn(3, 32, 32, generator=gen)
            z = codec.encode(x)
            assert (codec.decode(z) - x).abs().max() <= 1e-5
            rel = abs(float((z**2).sum() - (x**2).sum())) / float((x**2).sum())
            assert rel <= 1e-4

            latent = torch.randn(1, 5, 8, 8, generator=gen)
            tokens = patch_flatten(latent, 2)
            assert torch.equal(unpatchify(tokens, (4, 4), 2, 5), latent)


def test_criterion_07_training_smoke(toy_runs):
    with criterion(7, "training smoke: both objectives halve the smoothed loss; exact resume"):
        for objective in ("ddpm", "rfm"):
            out = toy_runs[objective]["out"]
            rows = read_loss_log(out / "loss.csv")
            assert len(rows) == 2000
            assert all(math.isfinite(r["loss"]) for r in rows)
            early = smoothed_loss_at(rows, 50, window=100)
            late = smoothed_loss_at(rows, 2000, window=100)
            assert late <= 0.5 * early, f"{objective}: {late:.4f} vs 0.5*{early:.4f}"
            print(f"    {objective}: smoothed loss {early:.4f} @50 -> {late:.4f} @2000")

        # resuming the ddpm run from step 1500 reproduces the final state
        ddpm = toy_runs["ddpm"]
        settings = toy_runs["settings"]
        resumed = train(
            ddpm["train_cfg"], settings.model, settings.codec, toy_runs["data"],
            ddpm["out"].parent / "run_ddpm_resume",
            resume=ddpm["out"] / "ckpt_0001500",
        )
        final = Checkpoint.load(ddpm["out"] / "ckpt_final")
        assert resumed.step == final.step == 2000
        assert_states_equal(resumed.model_state, final.model_state)
        assert_states_equal(resumed.ema_state, final.ema_state)
        assert_states_equal(resumed.opt_m, final.opt_m)
        assert_states_equal(resumed.opt_v, final.opt_v)


def test_criterion_08_conditioning_effectiveness(toy_runs):
    with criterion(8, "guided generations follow the mask and the caption"):
        ck = Checkpoint.load(toy_runs["ddpm"]["out"] / "ckpt_final")
        sampler = SamplerConfig(kind="ddim", steps=50, seed=123)
        probe = conditioning_probe(ck, toy_runs["data"], sampler, n=64, omega=4.0,
                                   flip_field="hair")
        print(
            f"    matched acc {probe.matched_accuracy:.3f}, "
            f"mismatched acc {probe.mismatched_accuracy:.3f}, "
            f"gap {probe.accuracy_gap:.3f}, hair-flip rate {probe.flip_rate:.3f}"
        )
        assert probe.accuracy_gap >= 0.10
        assert probe.flip_rate >= 0.60

        baseline_path = Path(__file__).parent / "data" / "toy_baseline.json"
        baseline = json.loads(baseline_path.read_text())
        assert baseline["probe_ddpm"]["gap"] >= 0.10
        assert baseline["probe_ddpm"]["flip_rate"] >= 0.60


def test_criterion_09_trainer_mechanics():
    with criterion(9, "optimizer plumbing: weights, clipping, EMA, schedule, accumulation, dropout"):
        assert float(min_snr_weight_from_snr(torch.tensor(25.0))) == pytest.approx(0.2)
        assert float(min_snr_weight_from_snr(torch.tensor(5.0))) == pytest.approx(1.0)
        assert float(min_snr_weight_from_snr(torch.tensor(0.5))) == pytest.approx(1.0)

        p = torch.nn.Parameter(torch.zeros(25))
        p.grad = torch.ones(25)
        assert clip_gradients([p], 0.5) == pytest.approx(5.0)
        assert float(p.grad.norm()) == pytest.approx(0.5, abs=1e-6)

        e0, val, decay, n = 1.0, -3.0, 0.9999, 57
        ema = {"w": torch.full((2,), e0, dtype=torch.float64)}
        model = {"w": torch.full((2,), val, dtype=torch.float64)}
        for _ in range(n):
            ema_update(ema, model.items(), decay)
        want = val + (e0 - val) * decay**n
        assert torch.allclose(ema["w"], torch.full((2,), want, dtype=torch.float64), atol=1e-12)

        assert cosine_lr(0, 100, 1000, 1e-4) == 0.0
        assert cosine_lr(100, 100, 1000, 1e-4) == pytest.approx(1e-4)
        assert abs(cosine_lr(1000, 100, 1000, 1e-4)) <= 1e-12

        # gradient accumulation equals the single large batch
        sched = make_linear_schedule(100)
        torch.manual_seed(10)
        model_a = DualStreamDiT(GRAD_CHECK_CONFIG).double()
        model_b = DualStreamDiT(GRAD_CHECK_CONFIG).double()
        model_b.load_state_dict(model_a.state_dict())
        full = make_batch(batch=8, channels=3, side=8, caption_len=4,
                          dtype=torch.float64, seed=11)
        model_a.zero_grad()
        ddpm_loss(model_a, full, sched, seed=12, step=1).loss.backward()
        model_b.zero_grad()
        for micro in range(4):
            sl = slice(2 * micro, 2 * micro + 2)
            part = TrainBatch(z0=full.z0[sl], z_cond=full.z_cond[sl],
                              caption_tokens=full.caption_tokens[sl],
                              modality=full.modality[sl], sample_ids=full.sample_ids[sl])
            (ddpm_loss(model_b, part, sched, seed=12, step=1).loss / 4).backward()
        for (name, pa), (_, pb) in zip(model_a.named_parameters(), model_b.named_parameters()):
            ga, gb = grad_or_zeros(pa), grad_or_zeros(pb)
            denom = float(ga.abs().max())
            if denom == 0.0:
                assert float(gb.abs().max()) < 1e-12, name
            else:
                assert float((ga - gb).abs().max()) / denom < 1e-6, name

        n_draw = 100_000
        big = TrainBatch(
            z0=torch.zeros(n_draw, 1, 1, 1), z_cond=torch.ones(n_draw, 1, 1, 1),
            caption_tokens=torch.ones(n_draw, 1, dtype=torch.long),
            modality=torch.zeros(n_draw, dtype=torch.long),
            sample_ids=tuple(range(n_draw)),
        )
        dropped = apply_cond_dropout(big, 0.05, seed=13, step=1)
        text_rate = float((dropped.caption_tokens == 0).float().mean())
        spatial_rate = float((dropped.z_cond == 0).float().mean())
        assert 0.045 <= text_rate <= 0.055
        assert 0.045 <= spatial_rate <= 0.055


def test_criterion_10_metrics_suite():
    with criterion(10, "metrics: SSIM identities, worked mask example, exact palette segmentation"):
        rng = np.random.default_rng(14)
        x = rng.random((32, 32))
        y = rng.random((32, 32))
        assert ssim(x, x) == pytest.approx(1.0, abs=1e-6)
        assert abs(ssim(x, y) - ssim(y, x)) <= 1e-9

        gt = np.array([[0, 0], [1, 1]])
        pred = np.array([[0, 1], [1, 1]])
        acc, iou, miou = mask_agreement(pred, gt, num_classes=2)
        assert acc == 0.75
        assert iou[0] == 0.5 and iou[1] == pytest.approx(2 / 3)
        assert miou == pytest.approx(7 / 12)

        for sid in range(32):
            scene = toydata.synthesize_scene(7, sid, 32)
            agreement, _, _ = mask_agreement(segment_toy(scene.image), scene.mask)
            assert agreement == 1.0

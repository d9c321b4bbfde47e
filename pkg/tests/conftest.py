import numpy as np
import pytest
import torch

from ddit.dit_core import DualStreamDiT, ModelConfig
from ddit.latentcodec import CodecConfig
from ddit.trainer import Checkpoint, TrainConfig
from ddit import toydata


@pytest.fixture(autouse=True)
def _single_thread():
    # keep matmul reduction order stable for bit-exactness checks
    torch.set_num_threads(1)


@pytest.fixture
def tiny_model_cfg():
    return ModelConfig(
        hidden=32, depth=2, heads=2, patch=2, latent_channels=48,
        text_dim=16, text_len_max=8, vocab_size=toydata.VOCAB_SIZE, freq_dim=16,
    )


@pytest.fixture
def tiny_train_cfg():
    return TrainConfig(
        objective="ddpm", max_steps=8, batch_size=4, accum_steps=1,
        base_lr=1e-3, warmup_steps=2, ema_decay=0.99, cond_dropout=0.05,
        seed=11, checkpoint_every=5,
    )


@pytest.fixture
def haar_codec_cfg():
    return CodecConfig(kind="haar", levels=2, scaling=1.0)


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("data") / "toy32"
    toydata.write_dataset(32, seed=5, out_dir=root, size=32)
    return root


def make_checkpoint(model_cfg, train_cfg, codec_cfg, step=0, model=None) -> Checkpoint:
    """In-memory checkpoint around a (possibly fresh) model."""
    if model is None:
        torch.manual_seed(0)
        model = DualStreamDiT(model_cfg)
    params = {k: v.detach().clone() for k, v in model.named_parameters()}
    return Checkpoint(
        model_state=params,
        ema_state={k: v.clone() for k, v in params.items()},
        opt_m={k: torch.zeros_like(v) for k, v in params.items()},
        opt_v={k: torch.zeros_like(v) for k, v in params.items()},
        opt_step=0,
        step=step,
        model_cfg=model_cfg,
        train_cfg=train_cfg,
        codec_cfg=codec_cfg,
    )


def assert_states_equal(a: dict, b: dict):
    assert set(a) == set(b)
    for name in a:
        assert torch.equal(a[name], b[name]), f"tensor {name} differs"


def rel_err(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    denom = np.maximum(np.abs(a), np.abs(b))
    out = np.zeros_like(denom)
    nonzero = denom > 1e-12
    out[nonzero] = np.abs(a - b)[nonzero] / denom[nonzero]
    return out

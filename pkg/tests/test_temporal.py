import pytest
import torch
from einops import rearrange

from latentvideo.backbone import UNetConfig, build_unet
from latentvideo.nncore import grad_check, state_checksum
from latentvideo.schedule import ConfigurationError, Parameterization, make_linear_schedule
from latentvideo.temporal import (
    ContextEncoder,
    ContextSpec,
    IncompatibleBackboneError,
    MergeAlpha,
    TemporalAttentionBlock,
    TemporalConfig,
    TemporalConvBlock,
    VideoDenoiser,
    assemble_video_denoiser,
    build_temporal_layers,
    encode_context,
    merge,
    swap_spatial_backbone,
    to_batch,
    to_video,
    train_temporal,
)

SMALL_UNET = UNetConfig(
    in_channels=4, base_channels=16, channel_multipliers=(1, 2),
    attention_levels=(1,), head_channels=8,
)


def small_video_model(mode="full", use_context=False, seed=0, **kw):
    spatial = build_unet(SMALL_UNET, seed=seed)
    cfg = TemporalConfig(
        mode=mode, seq_len=kw.pop("seq_len", 8), head_channels=8,
        context_channels=kw.pop("context_channels", 16),
        use_context=use_context, **kw,
    )
    return assemble_video_denoiser(spatial, build_temporal_layers(spatial, cfg, seed=seed))


def unzero(model, seed=99):
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in model.parameters():
            if p.numel() and p.abs().max() == 0:
                p.copy_(torch.randn(p.shape, generator=g) * 0.2)
    return model


# --- rearranging ------------------------------------------------------------

def test_to_video_index_mapping():
    # batch row 4 with B=2, T=3 is video 1, frame 1
    z = torch.arange(6).float().reshape(6, 1, 1, 1)
    v = to_video(z, 3)
    assert v[1, 0, 1, 0, 0].item() == 4.0


def test_to_video_round_trip_bitwise():
    g = torch.Generator().manual_seed(0)
    z = torch.randn(12, 3, 5, 7, generator=g)
    assert torch.equal(to_batch(to_video(z, 4)), z)


def test_to_video_t1_is_pure_reshape():
    z = torch.randn(5, 2, 3, 3)
    v = to_video(z, 1)
    assert v.shape == (5, 2, 1, 3, 3)
    assert torch.equal(v.reshape(5, 2, 3, 3), z)


def test_to_video_divisibility():
    with pytest.raises(ValueError):
        to_video(torch.zeros(5, 1, 2, 2), 2)


# --- merge ------------------------------------------------------------------

def test_merge_endpoints_and_midpoint():
    z = torch.full((1, 1, 2, 2, 2), 2.0)
    zp = torch.full((1, 1, 2, 2, 2), 4.0)
    assert merge(z, zp, 1.0) is z
    assert merge(z, zp, 0.0) is zp
    assert torch.equal(merge(z, zp, 0.5), torch.full_like(z, 3.0))


def test_merge_per_frame_alpha():
    z = torch.ones(1, 1, 3, 1, 1)
    zp = torch.zeros(1, 1, 3, 1, 1)
    alpha = torch.tensor([1.0, 0.5, 0.0])
    out = merge(z, zp, alpha)
    assert torch.equal(out[0, 0, :, 0, 0], alpha)
    with pytest.raises(ValueError):
        merge(z, zp, torch.ones(4))


def test_merge_shape_mismatch():
    with pytest.raises(ValueError):
        merge(torch.zeros(1, 1, 2, 2, 2), torch.zeros(1, 1, 2, 2, 3), 0.5)


def test_merge_alpha_init_and_range():
    a = MergeAlpha("scalar", 8)
    assert a.value().item() == pytest.approx(0.99, abs=0.001)
    b = MergeAlpha("per_frame", 8)
    assert b.value().shape == (8,)
    assert ((b.value() > 0) & (b.value() < 1)).all()


# --- blocks -----------------------------------------------------------------

def test_conv_block_is_identity_at_init():
    cfg = TemporalConfig(seq_len=4, head_channels=8)
    block = TemporalConvBlock(8, cfg, temb_dim=16)
    z = torch.randn(2, 8, 4, 5, 5, generator=torch.Generator().manual_seed(1))
    temb = torch.randn(2, 16)
    assert torch.equal(block(z, temb), z)


def test_attention_block_single_frame_matches_value_path():
    cfg = TemporalConfig(seq_len=1, head_channels=4, rel_dim=4)
    block = unzero(TemporalAttentionBlock(8, cfg))
    z = torch.randn(2, 8, 1, 3, 3, generator=torch.Generator().manual_seed(2))
    out = block(z)
    # With one frame, softmax weights are 1: attention output equals v.
    seq = rearrange(z, "b c t h w -> (b h w) t c")
    _, _, v = block.qkv(block.norm(seq)).chunk(3, dim=-1)
    expected = seq + block.proj(v)
    assert torch.allclose(out, rearrange(expected, "(b h w) t c -> b c t h w",
                                         b=2, h=3, w=3), atol=1e-6)


def test_attention_block_window_locality():
    cfg = TemporalConfig(seq_len=4, head_channels=4, rel_dim=4)
    block = unzero(TemporalAttentionBlock(8, cfg))
    g = torch.Generator().manual_seed(3)
    z = torch.randn(1, 8, 4, 2, 2, generator=g)
    base = block(z, window=1)
    probe = z.clone()
    probe[:, :, 0] += 5.0
    out = block(probe, window=1)
    assert not torch.equal(out[:, :, 1], base[:, :, 1])
    assert torch.equal(out[:, :, 3], base[:, :, 3])


def test_conv_block_context_concat():
    cfg = TemporalConfig(seq_len=4, head_channels=8, use_context=True,
                         context_channels=6)
    block = unzero(TemporalConvBlock(8, cfg, temb_dim=16, ctx_channels=6))
    z = torch.randn(1, 8, 4, 5, 5)
    ctx = torch.randn(1, 6, 4, 5, 5)
    temb = torch.randn(1, 16)
    out1 = block(z, temb, ctx)
    out2 = block(z, temb, torch.zeros_like(ctx))
    assert out1.shape == z.shape
    assert not torch.allclose(out1, out2)


# --- context ----------------------------------------------------------------

def test_context_spec_invariants():
    mask = torch.tensor([1.0, 1.0, 0.0, 0.0])
    latents = torch.randn(2, 4, 3, 8, 8)
    ctx = ContextSpec.from_frames(mask, latents)
    assert torch.equal(ctx.s, torch.tensor([2, 2]))
    assert ctx.latents[:, 2:].abs().max() == 0
    with pytest.raises(ValueError):
        ContextSpec(mask=mask.expand(2, 4), latents=latents)  # not masked out


def test_encode_context_shapes_and_default_width():
    enc = ContextEncoder(latent_channels=4, context_channels=128, levels=3)
    ctx = ContextSpec.from_frames(torch.tensor([1.0, 1.0, 0, 0, 0, 0, 0, 0]),
                                  torch.randn(2, 8, 4, 16, 16))
    feats = encode_context(enc, ctx)
    assert [f.shape for f in feats] == [
        torch.Size([2, 128, 8, 16, 16]),
        torch.Size([2, 128, 8, 8, 8]),
        torch.Size([2, 128, 8, 4, 4]),
    ]


def test_encode_context_s0_runs():
    enc = ContextEncoder(4, 16, 2)
    feats = encode_context(enc, ContextSpec.empty(1, 4, 4, 8, 8))
    assert all(torch.isfinite(f).all() for f in feats)


# --- assembled model --------------------------------------------------------

def test_alpha_override_bit_equals_image_model():
    model = unzero(small_video_model())
    g = torch.Generator().manual_seed(4)
    video = torch.randn(2, 8, 4, 8, 8, generator=g)
    tau = torch.tensor([100.0, 600.0])
    out = model(video, tau, alpha_override=1.0)
    flat = rearrange(video, "b t c h w -> (b t) c h w")
    ref = model.spatial(flat, tau.repeat_interleave(8))
    assert torch.equal(out, rearrange(ref, "(b t) c h w -> b t c h w", t=8))


def test_initialized_model_close_to_image_model():
    model = small_video_model()
    g = torch.Generator().manual_seed(5)
    video = torch.randn(1, 8, 4, 8, 8, generator=g)
    tau = torch.tensor([300.0])
    with_temporal = model(video, tau)
    skip = model(video, tau, alpha_override=1.0)
    assert (with_temporal - skip).abs().max() < 1e-2


def test_spatial_permutation_covariance_at_alpha_one():
    model = unzero(small_video_model())
    g = torch.Generator().manual_seed(6)
    video = torch.randn(1, 6, 4, 8, 8, generator=g)
    tau = torch.tensor([50.0])
    perm = torch.tensor([2, 0, 5, 1, 4, 3])
    out = model(video, tau, alpha_override=1.0)
    out_perm = model(video[:, perm], tau, alpha_override=1.0)
    assert torch.equal(out[:, perm], out_perm)


def test_attention_only_mode_structure():
    model = small_video_model(mode="attention_only")
    for stack in model.temporal.blocks:
        assert len(stack) == 2
        assert all(isinstance(b, TemporalAttentionBlock) for b in stack)
    assert model.temporal.ctx_encoder is None


def test_attention_only_with_context_rejected():
    with pytest.raises(ConfigurationError):
        TemporalConfig(mode="attention_only", use_context=True)


def test_end_to_end_mode_marks_spatial_trainable():
    frozen = small_video_model(mode="full")
    assert all(not p.requires_grad for p in frozen.spatial.parameters())
    e2e = small_video_model(mode="end_to_end")
    assert all(p.requires_grad for p in e2e.spatial.parameters())


def test_context_zero_sensitivity():
    model = unzero(small_video_model(use_context=True))
    g = torch.Generator().manual_seed(7)
    video = torch.randn(1, 8, 4, 8, 8, generator=g)
    tau = torch.tensor([200.0])
    zero_mask = torch.zeros(8)
    a = model(video, tau, ctx=ContextSpec.from_frames(zero_mask, torch.randn(1, 8, 4, 8, 8, generator=g)))
    b = model(video, tau, ctx=ContextSpec.from_frames(zero_mask, torch.randn(1, 8, 4, 8, 8, generator=g)))
    assert torch.equal(a, b)


def test_context_changes_output():
    model = unzero(small_video_model(use_context=True))
    g = torch.Generator().manual_seed(8)
    video = torch.randn(1, 8, 4, 8, 8, generator=g)
    tau = torch.tensor([200.0])
    ctx_frames = torch.randn(1, 8, 4, 8, 8, generator=g)
    with_ctx = model(video, tau, ctx=ContextSpec.from_frames(
        torch.tensor([1.0, 1, 0, 0, 0, 0, 0, 0]), ctx_frames))
    without = model(video, tau)
    assert not torch.allclose(with_ctx, without)


def test_per_frame_alpha_rejects_other_lengths():
    model = small_video_model(alpha_param="per_frame", seq_len=4)
    video = torch.randn(1, 6, 4, 8, 8)
    with pytest.raises(IncompatibleBackboneError):
        model(video, torch.tensor([10.0]))


def test_window_locality_through_full_model():
    cfg = UNetConfig(in_channels=2, base_channels=8, channel_multipliers=(1,),
                     attention_levels=(), head_channels=8)
    spatial = build_unet(cfg, seed=0)
    tcfg = TemporalConfig(seq_len=4, head_channels=8, rel_dim=4)
    model = unzero(assemble_video_denoiser(
        spatial, build_temporal_layers(spatial, tcfg, seed=0)))
    reach = model.temporal_receptive_field(window=1)
    t_ext = 2 * reach + 4
    g = torch.Generator().manual_seed(9)
    video = torch.randn(1, t_ext, 2, 4, 4, generator=g)
    tau = torch.tensor([77.0])
    base = model(video, tau, attention_window=1)
    probe = video.clone()
    probe[:, 0] += 3.0
    out = model(probe, tau, attention_window=1)
    assert not torch.equal(out[:, : reach], base[:, : reach])
    assert torch.equal(out[:, reach + 1 :], base[:, reach + 1 :])
    assert model.temporal_receptive_field(window=None) is None


def test_swap_backbone_identity_and_mismatch():
    model = small_video_model()
    swapped = swap_spatial_backbone(model, model.spatial)
    video = torch.randn(1, 8, 4, 8, 8, generator=torch.Generator().manual_seed(10))
    tau = torch.tensor([5.0])
    assert torch.equal(model(video, tau), swapped(video, tau))

    other_cfg = UNetConfig(in_channels=4, base_channels=24, channel_multipliers=(1, 2),
                           attention_levels=(1,), head_channels=8)
    other = build_unet(other_cfg, seed=0)
    with pytest.raises(IncompatibleBackboneError, match="down0.res0"):
        swap_spatial_backbone(model, other)


@pytest.fixture(scope="module")
def pretrained_spatial(synthetic_latents):
    """Spatial net briefly image-trained on frames (temporal training over an
    untrained backbone is vacuous: the frozen zero-init output conv blocks
    every gradient)."""
    from latentvideo.backbone import train_image_dm

    sched = make_linear_schedule(0.0015, 0.0195, 1000)
    spatial = build_unet(SMALL_UNET, seed=0)
    frames = synthetic_latents.reshape(-1, *synthetic_latents.shape[2:])
    train_image_dm(spatial, frames, None, sched, Parameterization.V, steps=150,
                   rng=torch.Generator().manual_seed(3))
    return spatial


def test_train_temporal_loss_decreases_and_freezes_spatial(
    synthetic_latents, pretrained_spatial
):
    sched = make_linear_schedule(0.0015, 0.0195, 1000)
    cfg = TemporalConfig(mode="full", seq_len=8, head_channels=8,
                         context_channels=16, use_context=True)
    model = assemble_video_denoiser(
        pretrained_spatial, build_temporal_layers(pretrained_spatial, cfg, seed=0))
    before = state_checksum(model.spatial)
    losses = train_temporal(
        model, synthetic_latents, sched, Parameterization.V, steps=300,
        rng=torch.Generator().manual_seed(0),
    )
    assert state_checksum(model.spatial) == before
    assert sum(losses[-50:]) / 50 < sum(losses[:50]) / 50


def test_train_temporal_attention_only_freezes_spatial(
    synthetic_latents, pretrained_spatial
):
    sched = make_linear_schedule(0.0015, 0.0195, 1000)
    cfg = TemporalConfig(mode="attention_only", seq_len=8, head_channels=8)
    model = assemble_video_denoiser(
        pretrained_spatial, build_temporal_layers(pretrained_spatial, cfg, seed=0))
    before = state_checksum(model.spatial)
    losses = train_temporal(
        model, synthetic_latents, sched, Parameterization.V, steps=40,
        rng=torch.Generator().manual_seed(0),
    )
    assert state_checksum(model.spatial) == before
    assert all(torch.isfinite(torch.tensor(losses)))


def test_train_temporal_interpolation_regimes(synthetic_latents):
    sched = make_linear_schedule(0.0015, 0.0195, 1000)
    spatial = build_unet(SMALL_UNET, seed=0)
    cfg = TemporalConfig(seq_len=5, head_channels=8, use_context=True,
                         context_channels=16, regimes=2)
    model = assemble_video_denoiser(spatial, build_temporal_layers(spatial, cfg, seed=0))
    losses = train_temporal(
        model, synthetic_latents, sched, Parameterization.V, steps=12,
        task="interpolation", rng=torch.Generator().manual_seed(0),
    )
    assert all(torch.isfinite(torch.tensor(losses)))


def test_train_temporal_rejects_unknown_task(synthetic_latents):
    sched = make_linear_schedule(0.0015, 0.0195, 1000)
    model = small_video_model()
    with pytest.raises(ConfigurationError):
        train_temporal(model, synthetic_latents, sched, Parameterization.V,
                       steps=1, task="extrapolation")


def test_alpha_summary_human_readable():
    model = small_video_model()
    summary = model.alpha_summary()
    assert len(summary) == 2 * len(model.spatial.insertion_points())
    for values in summary.values():
        assert all(0.985 < v < 0.995 for v in values)


def test_full_temporal_block_grad_check():
    cfg = TemporalConfig(seq_len=3, head_channels=4, rel_dim=4)
    block = TemporalAttentionBlock(4, cfg).double()
    g = torch.Generator().manual_seed(11)
    z = torch.randn(1, 4, 3, 2, 2, generator=g, dtype=torch.float64)
    names = [n for n, _ in block.named_parameters()]
    tensors = [dict(block.named_parameters())[n].detach() for n in names]

    def f(*params):
        out = torch.func.functional_call(block, dict(zip(names, params)), (z,))
        return out.square().sum()

    err = grad_check(f, tensors, max_coords=5, rng=torch.Generator().manual_seed(12))
    assert err < 1e-3

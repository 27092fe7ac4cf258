import numpy as np
import pytest
import torch

from transflow.encoder import (Encoder, EncoderBlock, MultiHeadAttention, SelfAttentionBlock, TemporalAssociation,
                               adjacent_index, attention_weights, encoder_block, mca, msa, temporal_association)
from transflow.types import PatchGeometry

from oracles import attention, gelu, layer_norm, linear

torch.set_default_dtype(torch.float32)


def _np(p):
    return p.detach().double().numpy()


def attn_params(m: MultiHeadAttention):
    return dict(Wq=_np(m.q.weight), bq=_np(m.q.bias), Wk=_np(m.k.weight), bk=_np(m.k.bias),
                Wv=_np(m.v.weight), bv=_np(m.v.bias), Wo=_np(m.out.weight), bo=_np(m.out.bias),
                heads=m.num_heads)


def randomize(module, scale=0.5):
    with torch.no_grad():
        for p in module.parameters():
            p.copy_(torch.randn_like(p) * scale)


def test_msa_single_token():
    torch.manual_seed(0)
    m = MultiHeadAttention(8, 2)
    z = torch.randn(1, 8)
    out, w = msa(z, m, return_weights=True)
    assert torch.all(w == 1.0)
    assert torch.allclose(out, m.out(m.v(z)), atol=1e-6)


def test_msa_identical_tokens_uniform_rows():
    m = MultiHeadAttention(8, 2)
    z = torch.randn(1, 8).repeat(2, 1)
    _, w = msa(z, m, return_weights=True)
    assert torch.allclose(w, torch.full_like(w, 0.5), atol=1e-7)


def test_msa_matches_oracle():
    torch.manual_seed(1)
    m = MultiHeadAttention(8, 2).double()
    randomize(m)
    z = torch.randn(4, 8, dtype=torch.float64)
    out = msa(z, m).detach().numpy()
    ref, _ = attention(z.numpy(), z.numpy(), z.numpy(), **attn_params(m))
    assert np.abs(out - ref).max() < 1e-6


def test_mca_reduces_to_msa():
    torch.manual_seed(2)
    m = MultiHeadAttention(8, 4)
    z = torch.randn(5, 8)
    assert torch.equal(mca(z, z, m), msa(z, m))


def test_mca_single_adjacent_token():
    torch.manual_seed(3)
    m = MultiHeadAttention(8, 2)
    z = torch.randn(3, 8)
    adj = torch.randn(1, 8)
    out = m(z, adj)
    expected = m.out(m.v(adj)).expand(3, 8)
    assert torch.allclose(out, expected, atol=1e-6)


def test_mca_matches_oracle():
    torch.manual_seed(4)
    m = MultiHeadAttention(12, 3).double()
    randomize(m)
    z, adj = torch.randn(6, 12, dtype=torch.float64), torch.randn(6, 12, dtype=torch.float64)
    out = mca(z, adj, m).detach().numpy()
    ref, _ = attention(z.numpy(), adj.numpy(), adj.numpy(), **attn_params(m))
    assert np.abs(out - ref).max() < 1e-6


def test_mca_rejects_mismatched_tokens():
    m = MultiHeadAttention(8, 2)
    with pytest.raises(ValueError):
        mca(torch.randn(4, 8), torch.randn(5, 8), m)


def test_attention_rows_sum_to_one():
    torch.manual_seed(5)
    q, k = torch.randn(3, 4, 7, 5) * 5, torch.randn(3, 4, 9, 5) * 5
    w = attention_weights(q, k)
    assert (w.sum(-1) - 1).abs().max() < 1e-6


def test_attention_fails_fast_on_nonfinite():
    q = torch.randn(1, 2, 4)
    q[0, 0, 0] = float("inf")
    with pytest.raises(FloatingPointError):
        attention_weights(q, torch.randn(1, 3, 4))


def _zero_outputs(block: EncoderBlock):
    with torch.no_grad():
        for lin in (block.spatial.mlp.fc2, block.mlp.fc2, block.spatial.attn.out, block.cross.out):
            lin.weight.zero_()
            lin.bias.zero_()


def test_encoder_block_zero_outputs_is_identity():
    torch.manual_seed(6)
    block = EncoderBlock(8, 2)
    _zero_outputs(block)
    z, adj = torch.randn(4, 8), torch.randn(4, 8)
    y, z_new = encoder_block(z, adj, block)
    assert torch.equal(y, z) and torch.equal(z_new, z)


def _block_oracle(block: EncoderBlock, z, adj):
    def ln(m, x):
        return layer_norm(x, _np(m.weight), _np(m.bias))

    def mlp(m, x):
        return linear(gelu(linear(x, _np(m.fc1.weight), _np(m.fc1.bias))), _np(m.fc2.weight), _np(m.fc2.bias))

    s = block.spatial
    n = ln(s.norm, z)
    a, _ = attention(n, n, n, **attn_params(s.attn))
    y = z + mlp(s.mlp, a)
    c, _ = attention(ln(block.norm_y, y), ln(block.norm_adj, adj), ln(block.norm_adj, adj), **attn_params(block.cross))
    return y, y + mlp(block.mlp, c)


def test_encoder_block_hand_oracle_n2_d2():
    block = EncoderBlock(2, 1).double()
    torch.manual_seed(7)
    randomize(block, 0.8)
    z = torch.tensor([[0.3, -1.2], [2.0, 0.5]], dtype=torch.float64)
    adj = torch.tensor([[-0.7, 0.1], [1.1, 1.9]], dtype=torch.float64)
    y, z_new = encoder_block(z, adj, block)
    ry, rz = _block_oracle(block, z.numpy(), adj.numpy())
    assert np.abs(y.detach().numpy() - ry).max() < 1e-9
    assert np.abs(z_new.detach().numpy() - rz).max() < 1e-9


def test_layer_norm_of_two_vector_is_sign():
    # with unit gain and zero offset a 2-vector normalises to (+-1, -+1)
    x = np.array([[0.3, -1.2]])
    out = layer_norm(x, np.ones(2), np.zeros(2), eps=0.0)
    assert np.allclose(out, [[1.0, -1.0]])


@pytest.mark.parametrize("L", [1, 2, 12])
def test_stacked_blocks_preserve_shape(L):
    g = PatchGeometry(16, 16, 8, 8)
    enc = Encoder(g, 3, 16, 2, L, "learnable_abs")
    out = enc(torch.rand(1, 3, 16, 16, 3))
    assert out.shape == (1, 3, 2, 2, 16)


def test_adjacent_pairing():
    assert adjacent_index(5) == [1, 2, 3, 4, 3]
    assert adjacent_index(2) == [1, 0]
    with pytest.raises(ValueError):
        adjacent_index(1)


def test_temporal_uniform_oracle():
    d = 4
    ta = TemporalAssociation(d, 1)
    with torch.no_grad():
        ta.attn.v.weight.copy_(torch.eye(d))
        ta.attn.v.bias.zero_()
        ta.attn.out.weight.copy_(torch.eye(d))
        ta.attn.out.bias.zero_()
        ta.attn.q.weight.zero_()  # constant queries -> uniform attention
        ta.attn.q.bias.zero_()
    torch.manual_seed(8)
    frame = torch.randn(6, d)
    x = torch.stack([frame, frame])
    out, w = ta(x, return_weights=True)
    assert torch.allclose(w, torch.full_like(w, 1 / 6), atol=1e-7)
    assert torch.allclose(out, x + frame.mean(0), atol=1e-6)


def test_temporal_output_shape_default_T():
    g = PatchGeometry(64, 64, 8, 8)
    ta = TemporalAssociation(16, 2)
    out = temporal_association(torch.randn(5, g.grid_rows, g.grid_cols, 16), ta)
    assert out.shape == (5, 8, 8, 16)


def test_temporal_key_order_invariance():
    torch.manual_seed(9)
    ta = TemporalAssociation(8, 2)
    x = torch.randn(3, 5, 8)
    out = ta(x)
    perm = torch.randperm(5)
    x2 = x.clone()
    x2[1] = x[1, perm]
    x2[2] = x[2, perm]
    assert (ta(x2)[0] - out[0]).abs().max() < 1e-6


def test_temporal_zero_values_is_noop():
    ta = TemporalAssociation(8, 2)
    with torch.no_grad():
        ta.attn.v.weight.zero_()
        ta.attn.v.bias.zero_()
        ta.attn.out.bias.zero_()
    x = torch.randn(3, 5, 8)
    assert torch.equal(ta(x), x)


def test_temporal_needs_two_frames():
    with pytest.raises(ValueError):
        TemporalAssociation(8, 2)(torch.randn(1, 5, 8))


def test_temporal_matches_oracle():
    torch.manual_seed(10)
    ta = TemporalAssociation(8, 2).double()
    randomize(ta)
    x = torch.randn(3, 4, 8, dtype=torch.float64)
    out = ta(x).detach().numpy()
    xn = x.numpy()
    for t in range(3):
        ctx = np.concatenate([xn[s] for s in range(3) if s != t])
        q = layer_norm(xn[t], _np(ta.norm_q.weight), _np(ta.norm_q.bias))
        k = layer_norm(ctx, _np(ta.norm_k.weight), _np(ta.norm_k.bias))
        ref, _ = attention(q, k, ctx, **attn_params(ta.attn))
        assert np.abs(out[t] - (xn[t] + ref)).max() < 1e-6


def _encoder(seed=0):
    torch.manual_seed(seed)
    return Encoder(PatchGeometry(64, 64, 8, 8), 3, 64, 4, 2, "learnable_abs")


def test_encoder_deterministic():
    frames = torch.rand(1, 2, 64, 64, 3, generator=torch.Generator().manual_seed(0))
    assert torch.equal(_encoder()(frames), _encoder()(frames))


def test_encoder_smoke_bounds():
    frames = torch.rand(1, 2, 64, 64, 3)
    out = _encoder()(frames)
    assert out.shape == (1, 2, 8, 8, 64)
    assert torch.isfinite(out).all()
    assert out.norm(dim=-1).max() < 1e3


def test_encoder_sensitive_to_input():
    enc = _encoder()
    frames = torch.rand(1, 2, 64, 64, 3)
    assert (enc(frames) - enc(2 * frames)).abs().max() > 0


@pytest.mark.parametrize("kind", ["fixed_abs", "learnable_abs", "peg", "learnable_rel"])
def test_encoder_every_pos_kind(kind):
    torch.manual_seed(0)
    enc = Encoder(PatchGeometry(32, 32, 8, 8), 3, 16, 2, 2, kind)
    out = enc(torch.rand(2, 3, 32, 32, 3))
    assert out.shape == (2, 3, 4, 4, 16) and torch.isfinite(out).all()


def test_self_attention_block_zero_outputs_identity():
    b = SelfAttentionBlock(8, 2)
    with torch.no_grad():
        b.mlp.fc2.weight.zero_()
        b.mlp.fc2.bias.zero_()
    z = torch.randn(3, 8)
    assert torch.equal(b(z), z)


@pytest.mark.parametrize("kind", ["learnable_abs", "peg", "learnable_rel"])
def test_single_frames_are_independent(kind):
    torch.manual_seed(0)
    enc = Encoder(PatchGeometry(32, 32, 8, 8), 3, 16, 2, 2, kind)
    randomize(enc)
    frames = torch.rand(1, 2, 32, 32, 3)
    tokens = enc.embedder(frames)
    out = enc.single_frames(tokens)
    alone = enc.single_frames(tokens[:, :1])
    changed = tokens.clone()
    changed[:, 1] = torch.randn_like(changed[:, 1])
    assert out.shape == tokens.shape
    assert torch.allclose(out[:, :1], alone, atol=1e-6)
    assert torch.allclose(enc.single_frames(changed)[:, 0], out[:, 0], atol=1e-6)

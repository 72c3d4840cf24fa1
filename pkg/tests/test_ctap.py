import math

import numpy as np
import pytest
import torch
import torch.nn.functional as F

from diffspeech.ctap import CTAP, CTAPBatch, CTAPConfig, MelDecoder, contrastive_loss, pair_separation, retrieval_accuracy
from diffspeech.prompt_encoder import PromptConfig

SMALL = dict(vocab_size=10, d=16, phoneme_dim=8, speech_layers=1, phoneme_layers=1, heads=2, ff_dim=32,
             decoder_hidden=16, prompt=PromptConfig(conv_channels=[2, 2, 4, 4, 8, 8], feature_dim=8, embed_dim=6))


def model(**kw):
    torch.manual_seed(0)
    return CTAP(CTAPConfig(**{**SMALL, **kw})).eval()


def brute_force_infonce(S, P, tau):
    s = [v / np.linalg.norm(v) for v in S]
    p = [v / np.linalg.norm(v) for v in P]
    M = len(s)
    sim = [[float(np.dot(a, b)) / tau for b in p] for a in s]
    fwd = np.mean([-sim[i][i] + math.log(sum(math.exp(x) for x in sim[i])) for i in range(M)])
    bwd = np.mean([-sim[i][i] + math.log(sum(math.exp(sim[j][i]) for j in range(M))) for i in range(M)])
    return 0.5 * (fwd + bwd)


def test_contrastive_matches_brute_force(rng):
    S, P = rng.standard_normal((2, 5, 4)), rng.standard_normal((2, 5, 4))
    mask = np.ones((2, 5), bool)
    mask[1, 3:] = False
    got = contrastive_loss(torch.from_numpy(S), torch.from_numpy(P), torch.from_numpy(mask), 0.3).item()
    assert abs(got - brute_force_infonce(S[mask], P[mask], 0.3)) < 1e-10


def test_contrastive_random_is_log_m():
    g = torch.Generator().manual_seed(0)
    M, vals = 256, []
    for _ in range(100):
        S = torch.randn(1, M, 512, generator=g, dtype=torch.float64)
        P = torch.randn(1, M, 512, generator=g, dtype=torch.float64)
        vals.append(contrastive_loss(S, P, None, 1.0).item())
    assert abs(np.mean(vals) - math.log(M)) < 0.05 * math.log(M)


def test_contrastive_perfect_alignment_limit():
    S = torch.eye(6, dtype=torch.float64).unsqueeze(0)
    assert contrastive_loss(S, S.clone(), None, 1e-3).item() < 1e-12


def test_contrastive_permutation_invariant(rng):
    S, P = torch.from_numpy(rng.standard_normal((1, 9, 4))), torch.from_numpy(rng.standard_normal((1, 9, 4)))
    perm = torch.from_numpy(rng.permutation(9))
    a = contrastive_loss(S, P, None, 0.5).item()
    b = contrastive_loss(S[:, perm], P[:, perm], None, 0.5).item()
    assert abs(a - b) < 1e-12


def test_contrastive_needs_two_frames():
    with pytest.raises(ValueError):
        contrastive_loss(torch.randn(1, 1, 4), torch.randn(1, 1, 4), None, 0.1)


def test_default_encoder_dims():
    m = CTAP()
    out = m.encode_speech(torch.randn(1, 100, 40))
    assert out.shape == (1, 100, 512)
    assert m.temperature.item() == pytest.approx(0.07)
    assert len(m.speech_encoder.transformer.layers) == 6 and len(m.phoneme_encoder.transformer.layers) == 4
    assert m.phoneme_encoder.embedding.embedding_dim == 256


def test_layer_norm_contract():
    m = model()
    S = m.encode_speech(torch.randn(2, 12, 40))
    assert torch.allclose(S.mean(-1), torch.zeros(2, 12), atol=1e-5)
    assert torch.allclose(S.var(-1, unbiased=False), torch.ones(2, 12), atol=1e-3)


def test_duplicate_rows_identical():
    m = model()
    x = torch.randn(1, 10, 40)
    S = m.encode_speech(x.repeat(2, 1, 1))
    assert torch.equal(S[0], S[1])


def test_phoneme_length_and_bounds():
    m = model()
    P, mask = m.encode_phonemes(torch.tensor([[1, 2, 3]]), torch.tensor([[2, 1, 3]]))
    assert P.shape == (1, 6, 16) and mask.all()
    m.encode_phonemes(torch.tensor([[0, 9]]), torch.tensor([[1, 1]]))
    with pytest.raises(ValueError):
        m.encode_phonemes(torch.tensor([[0, 10]]), torch.tensor([[1, 1]]))
    with pytest.raises(ValueError):
        m.encode_phonemes(torch.tensor([[-1, 1]]), torch.tensor([[1, 1]]))


def test_same_phonemes_identical_without_positions():
    m = model(positional=False)
    P, _ = m.encode_phonemes(torch.tensor([[4, 4, 4]]), torch.tensor([[3, 3, 3]]))
    # edge frames see the conv's zero padding; interior frames are indistinguishable
    inner = P[0, 1:-1]
    assert torch.allclose(inner, inner[:1].expand(7, -1), atol=1e-5)
    m2 = model(positional=True)
    P2, _ = m2.encode_phonemes(torch.tensor([[4, 4, 4]]), torch.tensor([[3, 3, 3]]))
    inner2 = P2[0, 1:-1]
    assert not torch.allclose(inner2, inner2[:1].expand(7, -1), atol=1e-5)


def test_shared_decoder_and_prompt_sensitivity():
    m = model()
    S = m.encode_speech(torch.randn(1, 8, 40))
    P, _ = m.encode_phonemes(torch.tensor([[1, 2]]), torch.tensor([[4, 4]]))
    g = torch.randn(1, 6)
    out_s = m.decode_to_mel(S, g)
    out_p = m.decode_to_mel(P, g)
    assert out_s.shape == out_p.shape == (1, 8, 40)
    # one decoder instance serves both paths
    assert sum(isinstance(mod, MelDecoder) for mod in m.modules()) == 1
    calls = []
    hook = m.decoder.register_forward_hook(lambda mod, i, o: calls.append(mod))
    m.decode_to_mel(S, g), m.decode_to_mel(P, g)
    hook.remove()
    assert calls[0] is calls[1] is m.decoder
    assert (m.decode_to_mel(S, g + 1.0) - out_s).abs().max() > 0


def test_total_is_sum_of_terms():
    m = model()
    batch = CTAPBatch(torch.randn(2, 7, 40), torch.tensor([[True] * 7, [True] * 5 + [False] * 2]),
                      torch.tensor([[1, 2, 3], [4, 5, 0]]), torch.tensor([[2, 2, 3], [3, 2, 0]]),
                      torch.randn(2, 300, 40))
    out = m.losses(batch, torch.randn(2, 6))
    assert abs(out["total"].item() - (out["contrastive"] + out["mse_speech"] + out["mse_phoneme"]).item()) < 1e-6


def test_retrieval_and_separation_oracles():
    S = torch.eye(4).unsqueeze(0)
    assert retrieval_accuracy(S, S) == 1.0
    assert retrieval_accuracy(S, S.flip(1)) == 0.0
    matched, mismatched = pair_separation(S, S)
    assert matched == pytest.approx(1.0) and mismatched == pytest.approx(0.0)


def test_temperature_clamped():
    m = model()
    with torch.no_grad():
        m.log_temperature.fill_(10.0)
    assert m.temperature.item() == 1.0
    with torch.no_grad():
        m.log_temperature.fill_(-20.0)
    assert m.temperature.item() == pytest.approx(1e-3)

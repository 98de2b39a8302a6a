import math

import numpy as np
import pytest
import torch

from m3lab import pyramid
from m3lab.model import ModelConfig, SequenceOverflow, ToyLMM

SMALL = ModelConfig(vocab=16, width=8, heads=2, layers=2, channels=4, image_channels=3, patch=2, grid=6, max_seq=64)


@pytest.fixture
def model():
    torch.manual_seed(0)
    m = ToyLMM(SMALL, seed=3).double()
    # move every parameter off its structured init so no pathway is degenerate
    with torch.no_grad():
        for p in m.parameters():
            p.add_(0.3 * torch.randn_like(p))
    return m


def sample(seed=0, n_visual=9, q=3, a=3):
    g = torch.Generator().manual_seed(seed)
    visual = torch.randn(n_visual, SMALL.channels, generator=g, dtype=torch.float64)
    question = torch.randint(0, SMALL.vocab, (q,), generator=g)
    answer = torch.randint(0, SMALL.vocab, (a,), generator=g)
    return visual, question, answer


def naive_forward(m, visual, question, prefix):
    """Token-by-token loops in numpy: one head, one position at a time."""
    P = {k: v.detach().numpy() for k, v in m.state_dict().items()}
    d, h = m.cfg.width, m.cfg.heads
    hd = d // h

    def lin(x, name):
        return P[name + ".weight"] @ x + P[name + ".bias"]

    def ln(x, name, eps=1e-5):
        mu = x.mean()
        var = ((x - mu) ** 2).mean()
        return (x - mu) / math.sqrt(var + eps) * P[name + ".weight"] + P[name + ".bias"]

    def gelu(z):
        return 0.5 * z * (1 + np.vectorize(math.erf)(z / math.sqrt(2)))

    xs = [lin(v, "projector") for v in visual.numpy()]
    xs += [P["tok_emb.weight"][t] for t in list(question.numpy()) + list(prefix)]
    xs = [x + P["pos_emb.weight"][i] for i, x in enumerate(xs)]
    for b in range(m.cfg.layers):
        pre = f"blocks.{b}."
        normed = [ln(x, pre + "ln1") for x in xs]
        qs = [lin(x, pre + "q") for x in normed]
        ks = [lin(x, pre + "k") for x in normed]
        vs = [lin(x, pre + "v") for x in normed]
        new = []
        for t in range(len(xs)):
            heads = []
            for j in range(h):
                sl = slice(j * hd, (j + 1) * hd)
                scores = [float(qs[t][sl] @ ks[u][sl]) / math.sqrt(hd) for u in range(t + 1)]
                mx = max(scores)
                w = [math.exp(s - mx) for s in scores]
                z = sum(w)
                heads.append(sum(wi / z * vs[u][sl] for u, wi in enumerate(w)))
            att = lin(np.concatenate(heads), pre + "o")
            x = xs[t] + att
            x = x + lin(gelu(lin(ln(x, pre + "ln2"), pre + "fc1")), pre + "fc2")
            new.append(x)
        xs = new
    logits = [lin(ln(x, "ln_f"), "head") for x in xs]
    start = len(visual) + len(question) - 1
    return np.array(logits[start:])


def test_forward_matches_naive_attention(model):
    visual, question, answer = sample(1)
    got = model(visual, question, answer[:-1]).detach().numpy()
    np.testing.assert_allclose(got, naive_forward(model, visual, question, list(answer[:-1].numpy())),
                               rtol=1e-9, atol=1e-10)


def test_causality(model):
    visual, question, answer = sample(2, a=4)
    base = model(visual, question, answer[:-1])
    perturbed = answer.clone()
    perturbed[2:] = (perturbed[2:] + 5) % SMALL.vocab
    other = model(visual, question, perturbed[:-1])
    # rows 0..2 see answer tokens 0..1 only
    torch.testing.assert_close(base[:3], other[:3], rtol=0, atol=0)
    assert not torch.allclose(base[3:], other[3:])


def test_softmax_normalization(model):
    visual, question, answer = sample(3)
    probs = model(visual, question, answer[:-1]).softmax(-1)
    torch.testing.assert_close(probs.sum(-1), torch.ones(3, dtype=torch.float64), rtol=0, atol=1e-6)


def test_zeroed_blocks_reduce_to_embedding_path(model):
    with torch.no_grad():
        for blk in model.blocks:
            for name, p in blk.named_parameters():
                if not name.startswith("ln"):
                    p.zero_()
    visual, question, answer = sample(4)
    got = model(visual, question, answer[:-1])
    toks = torch.cat([question, answer[:-1]])
    n = visual.shape[0]
    pos = torch.arange(n + len(toks))[n + len(question) - 1:]
    stream = model.tok_emb.weight[toks[len(question) - 1:]] + model.pos_emb.weight[pos]
    torch.testing.assert_close(got, model.head(model.ln_f(stream)))


def test_uniform_logits_give_l_log_v(model):
    with torch.no_grad():
        model.head.weight.zero_()
        model.head.bias.zero_()
    visual, question, answer = sample(5, a=4)
    assert abs(model.nll(visual, question, answer).item() - 4 * math.log(SMALL.vocab)) < 1e-9


def test_two_class_nll():
    cfg = ModelConfig(vocab=2, width=4, heads=1, layers=1, channels=2, image_channels=3, grid=3, max_seq=16)
    m = ToyLMM(cfg).double()
    with torch.no_grad():
        m.head.weight.zero_()
        m.head.bias.copy_(torch.tensor([math.log(3.0), 0.0], dtype=torch.float64))
    val = m.nll(torch.zeros(1, 2), torch.tensor([1]), torch.tensor([0])).item()
    assert val == pytest.approx(math.log(1 + 1 / 3), abs=1e-12)
    assert val == pytest.approx(0.2877, abs=1e-4)


def test_nll_is_token_by_token_chain(model):
    visual, question, answer = sample(6, a=4)
    total = 0.0
    for j in range(len(answer)):
        logits = model(visual, question, answer[:j] if j else None)[-1]
        z = logits.detach().numpy()
        total += -(z[answer[j]] - np.log(np.exp(z - z.max()).sum()) - z.max())
    assert model.nll(visual, question, answer).item() == pytest.approx(total, rel=1e-9)


def test_empty_answer_rejected(model):
    visual, question, _ = sample(7)
    with pytest.raises(ValueError):
        model.nll(visual, question, torch.zeros(0, dtype=torch.long))


def test_sequence_overflow(model):
    visual, question, answer = sample(8, n_visual=62)
    with pytest.raises(SequenceOverflow):
        model.nll(visual, question, answer)


def test_every_schedule_size_accepted(model):
    img = torch.rand(SMALL.resolution, SMALL.resolution, SMALL.image_channels, dtype=torch.float64)
    pyr = model.pyramid(img)
    assert pyr.schedule == [1, 9, 36]
    _, question, answer = sample(9)
    vals = [model.nll(pyramid.flatten(s), question, answer).item() for s in pyr.scales]
    assert all(math.isfinite(v) and v > 0 for v in vals)


def test_unused_positions_have_zero_grad(model):
    visual, question, answer = sample(10)
    g = model.grad(visual, question, answer)
    used = len(visual) + len(question) + len(answer) - 1
    assert torch.count_nonzero(g["pos_emb.weight"][used:]) == 0
    assert torch.count_nonzero(g["pos_emb.weight"][:used]) > 0
    assert set(g) == {n for n, _ in model.named_parameters()}


def test_directional_derivative(model):
    visual, question, answer = sample(11)
    g = model.grad(visual, question, answer)
    gen = torch.Generator().manual_seed(0)
    u = {n: torch.randn(p.shape, generator=gen, dtype=p.dtype) for n, p in model.named_parameters()}
    norm = math.sqrt(sum(float((v ** 2).sum()) for v in u.values()))
    u = {n: v / norm for n, v in u.items()}
    analytic = sum(float((g[n] * u[n]).sum()) for n in u)
    eps = 1e-5

    def shifted(sign):
        with torch.no_grad():
            for n, p in model.named_parameters():
                p.add_(sign * eps * u[n])
        val = model.nll(visual, question, answer).item()
        with torch.no_grad():
            for n, p in model.named_parameters():
                p.sub_(sign * eps * u[n])
        return val

    secant = (shifted(1) - shifted(-1)) / (2 * eps)
    assert analytic == pytest.approx(secant, rel=1e-5)


def test_encoder_zero_image_gives_bias(model):
    img = torch.zeros(SMALL.resolution, SMALL.resolution, SMALL.image_channels)
    grid = model.encode_image(img)
    assert grid.shape == (SMALL.grid, SMALL.grid, SMALL.channels)
    torch.testing.assert_close(grid, model.encoder.bias.expand_as(grid))


def test_encoder_resolution_checked(model):
    with pytest.raises(ValueError):
        model.encode_image(torch.zeros(5, 5, SMALL.image_channels))


def test_encoder_deterministic():
    img = torch.rand(SMALL.resolution, SMALL.resolution, SMALL.image_channels)
    a = ToyLMM(SMALL, seed=5).encode_image(img)
    b = ToyLMM(SMALL, seed=5).encode_image(img)
    assert a.detach().numpy().tobytes() == b.detach().numpy().tobytes()


def test_encoder_locality(model):
    img = torch.rand(SMALL.resolution, SMALL.resolution, SMALL.image_channels, dtype=torch.float64)
    base = model.encode_image(img)
    p = SMALL.patch
    bumped = img.clone()
    bumped[2 * p:3 * p, 4 * p:5 * p] += 1.0  # the patch of cell (2, 4)
    changed = (model.encode_image(bumped) - base).abs().amax(dim=-1) > 0
    expected = torch.zeros(SMALL.grid, SMALL.grid, dtype=torch.bool)
    expected[2, 4] = True
    assert torch.equal(changed, expected)


def beam_search(m, visual, question, max_len, width=1, eos=1):
    beams = [([], 0.0)]
    for _ in range(max_len):
        cand = []
        for seq, score in beams:
            if seq and seq[-1] == eos:
                cand.append((seq, score))
                continue
            with torch.no_grad():
                logp = m(visual, question, seq or None)[-1].log_softmax(-1)
            for tok in range(logp.shape[0]):
                cand.append((seq + [tok], score + float(logp[tok])))
        # stable sort keeps the lowest token id first among equal scores
        beams = sorted(cand, key=lambda c: -c[1])[:width]
        if all(s and s[-1] == eos for s, _ in beams):
            break
    return beams[0][0]


def test_greedy_equals_width_one_beam(model):
    for seed in range(4):
        visual, question, _ = sample(20 + seed)
        assert model.generate(visual, question, 5) == beam_search(model, visual, question, 5)


def test_generate_edge_cases(model):
    visual, question, _ = sample(12)
    assert model.generate(visual, question, 0) == []
    with torch.no_grad():
        model.head.weight.zero_()
        model.head.bias.zero_()
        model.head.bias[7] = 1.0
    assert model.generate(visual, question, 4) == [7, 7, 7, 7]
    with torch.no_grad():
        model.head.bias.zero_()
    # all tied: lowest id wins
    assert model.generate(visual, question, 2) == [0, 0]


def test_batched_generate_matches_single(model):
    vis = torch.stack([sample(30 + i)[0] for i in range(5)])
    qs = torch.stack([sample(30 + i)[1] for i in range(5)])
    batched = model.generate_batch(vis, qs, 4)
    assert batched == [model.generate(vis[i], qs[i], 4) for i in range(5)]

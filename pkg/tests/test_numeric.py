import math

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from squire import numeric as nx

import oracles

torch.set_default_dtype(torch.float32)


def test_masked_softmax_examples():
    assert torch.allclose(nx.masked_softmax(torch.tensor([1.0, 1.0]), torch.tensor([0.0, 0.0])), torch.tensor([0.5, 0.5]))
    out = nx.masked_softmax(torch.tensor([5.0, 9.0]), torch.tensor([0.0, -math.inf]))
    assert out.tolist() == [1.0, 0.0]


def test_masked_softmax_fully_hidden_row_is_zero():
    out = nx.masked_softmax(torch.randn(2, 3), torch.tensor([[0.0, nx.NEG_INF, 0.0], [nx.NEG_INF] * 3]))
    assert out[1].tolist() == [0.0, 0.0, 0.0]
    assert abs(out[0].sum().item() - 1) < 1e-6 and out[0, 1] == 0


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6), st.integers(0, 2**31 - 1))
def test_masked_softmax_rows_sum_to_one(rows, cols, seed):
    g = torch.Generator().manual_seed(seed)
    scores = torch.randn(rows, cols, generator=g) * 10
    hidden = torch.rand(rows, cols, generator=g) < 0.4
    mask = torch.zeros(rows, cols).masked_fill(hidden, nx.NEG_INF)
    p = nx.masked_softmax(scores, mask)
    for i in range(rows):
        if hidden[i].all():
            assert p[i].abs().sum() == 0
        else:
            assert abs(p[i].sum().item() - 1) < 1e-6
            assert (p[i][hidden[i]] == 0).all()


def test_layer_norm_constant_vector():
    assert torch.equal(nx.layer_norm(torch.full((2, 5), 3.0)), torch.zeros(2, 5))


def test_layer_norm_matches_reference():
    x = torch.randn(4, 7, dtype=torch.float64)
    w, b = torch.randn(7, dtype=torch.float64), torch.randn(7, dtype=torch.float64)
    assert torch.allclose(nx.layer_norm(x, w, b), nx.layer_norm_reference(x, w, b), atol=1e-12)


def test_shape_errors_name_the_op():
    with pytest.raises(nx.ShapeError, match="matmul"):
        nx.matmul(torch.zeros(2, 3), torch.zeros(4, 2))
    with pytest.raises(nx.ShapeError, match="add"):
        nx.add(torch.zeros(2, 3), torch.zeros(4))
    with pytest.raises(nx.ShapeError, match="masked_softmax"):
        nx.masked_softmax(torch.zeros(2, 3), torch.zeros(2))


def test_embedding_lookup_bounds():
    table = torch.arange(6.0).view(3, 2)
    assert nx.embedding_lookup(table, torch.tensor([2, 0])).tolist() == [[4.0, 5.0], [0.0, 1.0]]
    with pytest.raises(IndexError):
        nx.embedding_lookup(table, torch.tensor([3]))


def test_dropout_eval_is_identity():
    x = torch.randn(5, 5)
    assert nx.dropout(x, 0.5, train=False) is x


def test_dropout_train_scales_kept_units():
    g = torch.Generator().manual_seed(0)
    y = nx.dropout(torch.ones(10_000), 0.25, True, g)
    kept = y[y != 0]
    assert torch.allclose(kept, torch.full_like(kept, 1 / 0.75))
    assert abs(len(kept) / 10_000 - 0.75) < 0.02


def test_backward_square():
    x = torch.tensor(3.0, dtype=torch.float64, requires_grad=True)
    nx.backward(x * x)
    assert x.grad.item() == 6.0


def test_backward_before_forward_errors():
    with pytest.raises(RuntimeError):
        nx.backward(torch.tensor(0.0))


def test_constant_loss_gives_zero_gradient():
    w = torch.randn(3, dtype=torch.float64, requires_grad=True)
    loss = (w * 0).sum()
    nx.backward(loss)
    assert torch.equal(w.grad, torch.zeros(3, dtype=torch.float64))


def test_gradients_accumulate_by_summation():
    w = torch.tensor([1.0, 2.0], dtype=torch.float64, requires_grad=True)
    nx.backward((w**2).sum())
    nx.backward((3 * w).sum())
    assert w.grad.tolist() == [2 + 3, 4 + 3]


def test_composite_gradient_matches_finite_differences():
    g = torch.Generator().manual_seed(0)
    a = torch.randn(3, 4, generator=g, dtype=torch.float64, requires_grad=True)
    b = torch.randn(4, 5, generator=g, dtype=torch.float64, requires_grad=True)
    w = torch.randn(5, generator=g, dtype=torch.float64, requires_grad=True)
    mask = torch.zeros(3, 5, dtype=torch.float64)
    mask[0, 2] = nx.NEG_INF

    def f():
        h = nx.layer_norm(nx.gelu(nx.matmul(a, b)), w)
        return (nx.masked_softmax(h, mask) * torch.arange(5.0, dtype=torch.float64)).sum()

    nx.backward(f())
    for p in (a, b, w):
        assert nx.relative_error(p.grad, nx.numerical_gradient(f, p)) < 1e-5


def test_adam_first_step():
    p = torch.nn.Parameter(torch.tensor([1.0], dtype=torch.float64))
    opt = nx.Adam([p])
    p.grad = torch.tensor([1.0], dtype=torch.float64)
    opt.step(0.1)
    assert abs(p.item() - 0.9) < 1e-6
    assert p.grad is None and opt.t == 1


def test_adam_zero_grad_leaves_params():
    p = torch.nn.Parameter(torch.tensor([1.0, -2.0], dtype=torch.float64))
    opt = nx.Adam([p])
    p.grad = torch.zeros(2, dtype=torch.float64)
    opt.step(0.1)
    assert p.tolist() == [1.0, -2.0]


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=1, max_size=8), st.floats(1e-4, 0.5))
def test_adam_matches_scalar_reference(grads, lr):
    p = torch.nn.Parameter(torch.tensor([0.7], dtype=torch.float64))
    opt = nx.Adam([p])
    ref = oracles.adam_scalar(0.7, grads, lr)
    for g, want in zip(grads, ref):
        p.grad = torch.tensor([g], dtype=torch.float64)
        nx.adam_step(opt, lr)
        assert abs(p.item() - want) < 1e-12


def test_adam_constant_gradient_moves_monotonically():
    p = torch.nn.Parameter(torch.tensor([0.0], dtype=torch.float64))
    opt = nx.Adam([p])
    seen = [0.0]
    for _ in range(2):
        p.grad = torch.tensor([2.0], dtype=torch.float64)
        opt.step(0.01)
        seen.append(p.item())
    assert seen[0] > seen[1] > seen[2]


def test_lr_schedule_examples():
    assert nx.lr_at(50, 1000, 0.1, 1e-3) == pytest.approx(5e-4)
    assert nx.lr_at(100, 1000, 0.1, 1e-3) == pytest.approx(1e-3)
    assert nx.lr_at(550, 1000, 0.1, 1e-3) == pytest.approx(5e-4)
    assert nx.lr_at(0, 1000, 0.1, 1e-3) == 0.0
    assert nx.lr_at(1000, 1000, 0.1, 1e-3) == 0.0


def test_lr_schedule_rejects_bad_input():
    with pytest.raises(ValueError):
        nx.lr_at(5, 10, 1.0, 1e-3)
    with pytest.raises(ValueError):
        nx.lr_at(11, 10, 0.1, 1e-3)


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 500), st.floats(0.01, 0.99))
def test_lr_schedule_shape(total, ratio):
    w = nx.warmup_steps(total, ratio)
    vals = [nx.lr_at(s, total, ratio, 1.0) for s in range(total + 1)]
    assert max(vals) == pytest.approx(1.0)
    assert all(a <= b + 1e-12 for a, b in zip(vals[:w], vals[1 : w + 1]))
    assert all(a >= b - 1e-12 for a, b in zip(vals[w:], vals[w + 1 :]))


def test_checkpoint_roundtrip(tmp_path):
    params = {"emb": torch.randn(5, 3), "b": torch.randn(3), "s": torch.tensor(2.5)}
    nx.save_checkpoint(tmp_path / "c.bin", params, 5, 3, 1)
    header, back = nx.load_checkpoint(tmp_path / "c.bin")
    assert header == {"version": 1, "vocab_size": 5, "d": 3, "layers": 1}
    assert list(back) == list(params)
    for k in params:
        assert torch.equal(back[k], params[k])


def test_checkpoint_bad_magic(tmp_path):
    (tmp_path / "c.bin").write_bytes(b"nope" + bytes(40))
    with pytest.raises(ValueError, match="magic"):
        nx.load_checkpoint(tmp_path / "c.bin")


def test_check_finite():
    with pytest.raises(nx.NumericError):
        nx.check_finite(torch.tensor([1.0, float("nan")]), "x")

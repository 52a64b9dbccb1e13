"""Recurrent and convolutional building blocks.

Both GRU variants use the gate convention

    h_t = z * h_prev + (1 - z) * h_candidate

(z gates the carried state). The two conventions in circulation swap the
roles of z and 1-z; this one is fixed here and shared by the graph cell and
the plain cell so they agree algebraically on a single-node graph.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import tensor as T
from .tensor import Tensor
from .graph import ScaledLaplacian, chebyshev_terms, apply_filter_bank, split_filter_bank


def seeded_rng(seed: int) -> np.random.Generator:
    return np.random.default_rng(int(seed))


def uniform_init(rng: np.random.Generator, fan_in: int, shape) -> Tensor:
    """Weight tensor drawn uniform(-1/sqrt(fan_in), 1/sqrt(fan_in))."""
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


def zeros_param(shape) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


class Linear:
    """Affine map x @ W + b on row-major feature rows."""

    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator):
        self.in_features = in_features
        self.out_features = out_features
        self.weight = uniform_init(rng, in_features, (in_features, out_features))
        self.bias = zeros_param((1, out_features))

    def __call__(self, x: Tensor) -> Tensor:
        if x.data.ndim != 2 or x.shape[1] != self.in_features:
            raise ValueError(
                f"linear: expected rows x {self.in_features}, got {x.shape}")
        out = T.matmul(x, self.weight)
        return T.add(out, T.repeat_rows(self.bias, x.shape[0]))

    def parameters(self):
        return [("weight", self.weight), ("bias", self.bias)]


class GConvGruCell:
    """GRU cell whose affine transforms are Chebyshev graph convolutions.

    Six filter banks (update/reset/candidate, input-side and hidden-side) of
    shape K x F x H, plus per-gate bias rows. Hidden state is N x H for an
    N-node graph.
    """

    def __init__(self, k: int, in_features: int, hidden: int, rng: np.random.Generator,
                 bias: bool = True):
        if k < 1:
            raise ValueError(f"chebyshev order must be >= 1, got {k}")
        self.k = k
        self.in_features = in_features
        self.hidden = hidden
        self.use_bias = bias

        def bank(f_in):
            return uniform_init(rng, k * f_in, (k, f_in, hidden))

        self.theta_xz = bank(in_features)
        self.theta_hz = bank(hidden)
        self.theta_xr = bank(in_features)
        self.theta_hr = bank(hidden)
        self.theta_xh = bank(in_features)
        self.theta_hh = bank(hidden)
        if bias:
            self.bias_z = zeros_param((1, hidden))
            self.bias_r = zeros_param((1, hidden))
            self.bias_h = zeros_param((1, hidden))
        self._split = None

    def parameters(self):
        params = [
            ("theta_xz", self.theta_xz), ("theta_hz", self.theta_hz),
            ("theta_xr", self.theta_xr), ("theta_hr", self.theta_hr),
            ("theta_xh", self.theta_xh), ("theta_hh", self.theta_hh),
        ]
        if self.use_bias:
            params += [("bias_z", self.bias_z), ("bias_r", self.bias_r), ("bias_h", self.bias_h)]
        return params

    def _split_banks(self):
        # re-slice on every forward so the slices land on the live tape
        return {
            "xz": split_filter_bank(self.theta_xz),
            "hz": split_filter_bank(self.theta_hz),
            "xr": split_filter_bank(self.theta_xr),
            "hr": split_filter_bank(self.theta_hr),
            "xh": split_filter_bank(self.theta_xh),
            "hh": split_filter_bank(self.theta_hh),
        }

    def _step(self, x_t: Tensor, h_prev: Tensor, laplacian: ScaledLaplacian,
              banks, bias_rows):
        terms_x = chebyshev_terms(x_t, laplacian, self.k)
        terms_h = chebyshev_terms(h_prev, laplacian, self.k)
        z_pre = T.add(apply_filter_bank(terms_x, banks["xz"]),
                      apply_filter_bank(terms_h, banks["hz"]))
        r_pre = T.add(apply_filter_bank(terms_x, banks["xr"]),
                      apply_filter_bank(terms_h, banks["hr"]))
        if bias_rows is not None:
            z_pre = T.add(z_pre, bias_rows[0])
            r_pre = T.add(r_pre, bias_rows[1])
        z = T.sigmoid(z_pre)
        r = T.sigmoid(r_pre)
        gated = T.mul(r, h_prev)
        terms_g = chebyshev_terms(gated, laplacian, self.k)
        cand_pre = T.add(apply_filter_bank(terms_x, banks["xh"]),
                         apply_filter_bank(terms_g, banks["hh"]))
        if bias_rows is not None:
            cand_pre = T.add(cand_pre, bias_rows[2])
        cand = T.tanh(cand_pre)
        # z*h_prev + (1-z)*cand, written without a constant-ones tensor
        return T.add(cand, T.mul(z, T.sub(h_prev, cand)))

    def _bias_rows(self, n: int):
        if not self.use_bias:
            return None
        return (T.repeat_rows(self.bias_z, n),
                T.repeat_rows(self.bias_r, n),
                T.repeat_rows(self.bias_h, n))

    def step(self, x_t: Tensor, h_prev: Tensor, laplacian: ScaledLaplacian) -> Tensor:
        _check_step_shapes(self, x_t, h_prev, laplacian.n_nodes)
        return self._step(x_t, h_prev, laplacian, self._split_banks(),
                          self._bias_rows(x_t.shape[0]))

    def unroll(self, sequence: Tensor, laplacian: ScaledLaplacian,
               h0: Tensor | None = None):
        """Iterate the cell over a T x N x F sequence; returns (T x N x H, h_final)."""
        if sequence.data.ndim != 3:
            raise ValueError(f"unroll: sequence must be T x N x F, got {sequence.shape}")
        steps, n, f = sequence.shape
        if steps < 1:
            raise ValueError("unroll: empty sequence")
        if f != self.in_features:
            raise ValueError(f"unroll: sequence features {f} != cell input width {self.in_features}")
        h = h0 if h0 is not None else T.zeros((n, self.hidden))
        banks = self._split_banks()
        bias_rows = self._bias_rows(n)
        hidden = []
        for t in range(steps):
            x_t = T.reshape(T.slice_axis(sequence, 0, t, t + 1), (n, f))
            h = self._step(x_t, h, laplacian, banks, bias_rows)
            hidden.append(h)
        return T.stack(hidden, 0), h


def gconv_gru_step(cell: GConvGruCell, x_t: Tensor, h_prev: Tensor,
                   laplacian: ScaledLaplacian) -> Tensor:
    return cell.step(x_t, h_prev, laplacian)


def gconv_gru_unroll(cell: GConvGruCell, sequence: Tensor, laplacian: ScaledLaplacian,
                     h0: Tensor | None = None):
    return cell.unroll(sequence, laplacian, h0)


def _check_step_shapes(cell, x_t, h_prev, n):
    if x_t.data.ndim != 2 or x_t.shape[1] != cell.in_features:
        raise ValueError(f"step: x_t must be N x {cell.in_features}, got {x_t.shape}")
    if h_prev.shape != (x_t.shape[0], cell.hidden):
        raise ValueError(
            f"step: h_prev shape {h_prev.shape} does not match (N={x_t.shape[0]}, H={cell.hidden})")
    if x_t.shape[0] != n:
        raise ValueError(f"step: x_t has {x_t.shape[0]} rows but laplacian is {n} x {n}")


class GruCell:
    """Plain GRU cell on row batches: step maps (M x F, M x H) -> M x H."""

    def __init__(self, in_features: int, hidden: int, rng: np.random.Generator,
                 bias: bool = True):
        self.in_features = in_features
        self.hidden = hidden
        self.use_bias = bias
        self.w_xz = uniform_init(rng, in_features, (in_features, hidden))
        self.w_hz = uniform_init(rng, hidden, (hidden, hidden))
        self.w_xr = uniform_init(rng, in_features, (in_features, hidden))
        self.w_hr = uniform_init(rng, hidden, (hidden, hidden))
        self.w_xh = uniform_init(rng, in_features, (in_features, hidden))
        self.w_hh = uniform_init(rng, hidden, (hidden, hidden))
        if bias:
            self.bias_z = zeros_param((1, hidden))
            self.bias_r = zeros_param((1, hidden))
            self.bias_h = zeros_param((1, hidden))

    def parameters(self):
        params = [
            ("w_xz", self.w_xz), ("w_hz", self.w_hz),
            ("w_xr", self.w_xr), ("w_hr", self.w_hr),
            ("w_xh", self.w_xh), ("w_hh", self.w_hh),
        ]
        if self.use_bias:
            params += [("bias_z", self.bias_z), ("bias_r", self.bias_r), ("bias_h", self.bias_h)]
        return params

    def step(self, x_t: Tensor, h_prev: Tensor) -> Tensor:
        if x_t.data.ndim != 2 or x_t.shape[1] != self.in_features:
            raise ValueError(f"gru step: x_t must be M x {self.in_features}, got {x_t.shape}")
        if h_prev.shape != (x_t.shape[0], self.hidden):
            raise ValueError(
                f"gru step: h_prev shape {h_prev.shape} does not match (M={x_t.shape[0]}, H={self.hidden})")
        m = x_t.shape[0]
        z_pre = T.add(T.matmul(x_t, self.w_xz), T.matmul(h_prev, self.w_hz))
        r_pre = T.add(T.matmul(x_t, self.w_xr), T.matmul(h_prev, self.w_hr))
        if self.use_bias:
            z_pre = T.add(z_pre, T.repeat_rows(self.bias_z, m))
            r_pre = T.add(r_pre, T.repeat_rows(self.bias_r, m))
        z = T.sigmoid(z_pre)
        r = T.sigmoid(r_pre)
        cand_pre = T.add(T.matmul(x_t, self.w_xh),
                         T.matmul(T.mul(r, h_prev), self.w_hh))
        if self.use_bias:
            cand_pre = T.add(cand_pre, T.repeat_rows(self.bias_h, m))
        cand = T.tanh(cand_pre)
        return T.add(cand, T.mul(z, T.sub(h_prev, cand)))

    def unroll(self, sequence: Tensor, h0: Tensor | None = None, reverse: bool = False):
        """Iterate over a T x M x F sequence; returns (T x M x H, h_final).

        With reverse=True the sequence is consumed right-to-left and the
        per-step outputs are re-aligned to input positions.
        """
        if sequence.data.ndim != 3:
            raise ValueError(f"gru unroll: sequence must be T x M x F, got {sequence.shape}")
        steps, m, f = sequence.shape
        if steps < 1:
            raise ValueError("gru unroll: empty sequence")
        h = h0 if h0 is not None else T.zeros((m, self.hidden))
        order = range(steps - 1, -1, -1) if reverse else range(steps)
        hidden = [None] * steps
        for t in order:
            x_t = T.reshape(T.slice_axis(sequence, 0, t, t + 1), (m, f))
            h = self.step(x_t, h)
            hidden[t] = h
        return T.stack(hidden, 0), h


def gru_step(cell: GruCell, x_t: Tensor, h_prev: Tensor) -> Tensor:
    return cell.step(x_t, h_prev)


def gru_unroll(cell: GruCell, sequence: Tensor, h0: Tensor | None = None):
    return cell.unroll(sequence, h0)


class BidirectionalGru:
    """One forward and one backward GRU over the same sequence, outputs width 2H."""

    def __init__(self, in_features: int, hidden: int, rng: np.random.Generator,
                 bias: bool = True):
        self.in_features = in_features
        self.hidden = hidden
        self.forward_cell = GruCell(in_features, hidden, rng, bias=bias)
        self.backward_cell = GruCell(in_features, hidden, rng, bias=bias)

    def parameters(self):
        return ([("fwd." + n, p) for n, p in self.forward_cell.parameters()]
                + [("bwd." + n, p) for n, p in self.backward_cell.parameters()])


def bidirectional_unroll(bigru: BidirectionalGru, sequence: Tensor):
    """Returns (per-step outputs T x M x 2H, forward final M x H, backward final M x H)."""
    out_f, final_f = bigru.forward_cell.unroll(sequence)
    out_b, final_b = bigru.backward_cell.unroll(sequence, reverse=True)
    return T.concat([out_f, out_b], 2), final_f, final_b


class TemporalConv:
    """1-D cross-correlation over C_in x T with zero same-padding.

    Implemented as a single taped primitive: forward and both gradient sides
    go through sliding-window einsums rather than op composition.
    """

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int,
                 rng: np.random.Generator):
        if kernel_size < 1 or kernel_size % 2 == 0:
            raise ValueError(f"kernel_size must be odd and positive, got {kernel_size}")
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = kernel_size
        self.weight = uniform_init(rng, in_channels * kernel_size,
                                   (out_channels, in_channels, kernel_size))
        self.bias = zeros_param((out_channels, 1))

    def parameters(self):
        return [("weight", self.weight), ("bias", self.bias)]

    def __call__(self, x: Tensor) -> Tensor:
        return temporal_conv(self, x)


def temporal_conv(conv: TemporalConv, x: Tensor) -> Tensor:
    if x.data.ndim != 2 or x.shape[0] != conv.in_channels:
        raise ValueError(f"temporal_conv: expected {conv.in_channels} x T input, got {x.shape}")
    t_len = x.shape[1]
    k = conv.kernel_size
    if k > 2 * t_len + 1:
        raise ValueError(f"temporal_conv: kernel {k} wider than 2T+1 = {2 * t_len + 1}")
    pad = (k - 1) // 2
    w, b = conv.weight, conv.bias
    x_pad = np.pad(x.data, ((0, 0), (pad, pad)))
    windows = sliding_window_view(x_pad, k, axis=1)  # C x T x k
    out_data = np.einsum("ctk,ock->ot", windows, w.data) + b.data

    tape = T._active_tape()
    track = tape is not None and (x.requires_grad or w.requires_grad or b.requires_grad)
    out = Tensor._from_array(out_data, track)
    if track:
        w_data = w.data
        def rule(g):
            if w.requires_grad:
                T._accum(w, np.einsum("ot,ctk->ock", g, windows))
            if b.requires_grad:
                T._accum(b, g.sum(axis=1, keepdims=True))
            if x.requires_grad:
                g_pad = np.pad(g, ((0, 0), (pad, pad)))
                g_windows = sliding_window_view(g_pad, k, axis=1)  # O x T x k
                w_flip = w_data[:, :, ::-1]
                T._accum(x, np.einsum("otk,ock->ct", g_windows, w_flip))
        tape._record(out, rule)
    return out

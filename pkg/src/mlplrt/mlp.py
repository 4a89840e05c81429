"""One-hidden-layer perceptron with multivariate output and tanh units.

The network computes F(z) = b2 + W2 @ tanh(W1 @ z + b1) with
W1: (h, d_in), b1: (h,), W2: (d_out, h), b2: (d_out,).

Weight vectors are flat float arrays with a frozen layout so that masks and
serialized fits are portable:

    [0, h*d_in)                      hidden weights, unit-major: unit j owns
                                     indices j*d_in .. j*d_in + d_in - 1
    [h*d_in, h*d_in + h)             hidden biases, unit j at h*d_in + j
    [.., .. + d_out*h)               output weights, output-major: output i
                                     owns h consecutive entries
    last d_out                       output biases

The activation is fixed to tanh: the sign-flip symmetry handled by
`canonicalize` requires an odd, bounded, smooth sigmoid.
"""

import json
from dataclasses import dataclass, field

import numpy as np

DEFAULT_BOX_RADIUS = 50.0
INIT_HALF_WIDTH = 0.7


class ArchMismatch(Exception):
    pass


@dataclass(frozen=True)
class MLPArchitecture:
    input_dim: int
    hidden_units: int
    output_dim: int

    def __post_init__(self):
        for name in ("input_dim", "hidden_units", "output_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be a positive integer")

    @property
    def n_params(self):
        h, di, do = self.hidden_units, self.input_dim, self.output_dim
        return h * (di + 1) + do * (h + 1)

    # Section boundaries of the flat layout.
    @property
    def hidden_weight_slice(self):
        return slice(0, self.hidden_units * self.input_dim)

    @property
    def hidden_bias_slice(self):
        start = self.hidden_units * self.input_dim
        return slice(start, start + self.hidden_units)

    @property
    def output_weight_slice(self):
        start = self.hidden_units * (self.input_dim + 1)
        return slice(start, start + self.output_dim * self.hidden_units)

    @property
    def output_bias_slice(self):
        return slice(self.n_params - self.output_dim, self.n_params)

    def unpack(self, values):
        """Split a flat weight array into (W1, b1, W2, b2) views."""
        h, di, do = self.hidden_units, self.input_dim, self.output_dim
        w1 = values[self.hidden_weight_slice].reshape(h, di)
        b1 = values[self.hidden_bias_slice]
        w2 = values[self.output_weight_slice].reshape(do, h)
        b2 = values[self.output_bias_slice]
        return w1, b1, w2, b2

    def pack(self, w1, b1, w2, b2):
        return np.concatenate([np.ravel(w1), np.ravel(b1), np.ravel(w2), np.ravel(b2)])

    def to_dict(self):
        return {
            "input_dim": self.input_dim,
            "hidden_units": self.hidden_units,
            "output_dim": self.output_dim,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(int(d["input_dim"]), int(d["hidden_units"]), int(d["output_dim"]))


@dataclass
class WeightVector:
    """Flat parameter vector constrained to the box [-box_radius, box_radius]^s."""

    arch: MLPArchitecture
    values: np.ndarray
    box_radius: float = DEFAULT_BOX_RADIUS

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != (self.arch.n_params,):
            raise ArchMismatch(
                f"expected {self.arch.n_params} weights, got {self.values.shape}"
            )
        if not np.all(np.isfinite(self.values)):
            raise ValueError("weights must be finite")
        if np.any(np.abs(self.values) > self.box_radius):
            raise ValueError(f"weights outside the box [-{self.box_radius}, {self.box_radius}]")

    def unpack(self):
        return self.arch.unpack(self.values)

    def copy(self):
        return WeightVector(self.arch, self.values.copy(), self.box_radius)

    def to_json(self):
        return json.dumps(
            {"architecture": self.arch.to_dict(), "values": list(self.values)}
        )

    @classmethod
    def from_json(cls, text):
        d = json.loads(text)
        arch = MLPArchitecture.from_dict(d["architecture"])
        return cls(arch, np.asarray(d["values"], dtype=float))


@dataclass
class ParameterMask:
    """Boolean selector of free coordinates; pinned coordinates are held at 0."""

    arch: MLPArchitecture
    free: np.ndarray

    def __post_init__(self):
        self.free = np.asarray(self.free, dtype=bool)
        if self.free.shape != (self.arch.n_params,):
            raise ArchMismatch(
                f"mask length {self.free.shape} does not match {self.arch.n_params} weights"
            )
        if self.n_free < 1:
            raise ValueError("at least one coordinate must be free")

    @property
    def n_free(self):
        return int(np.count_nonzero(self.free))

    @property
    def n_pinned(self):
        return self.arch.n_params - self.n_free

    @classmethod
    def all_free(cls, arch):
        return cls(arch, np.ones(arch.n_params, dtype=bool))

    @classmethod
    def pin(cls, arch, indices):
        free = np.ones(arch.n_params, dtype=bool)
        free[list(indices)] = False
        return cls(arch, free)


def _check_input(arch, z):
    z = np.asarray(z, dtype=float)
    single = z.ndim == 1
    zz = z[None, :] if single else z
    if zz.shape[1] != arch.input_dim:
        raise ArchMismatch(f"input dim {zz.shape[1]} != {arch.input_dim}")
    return zz, single


def forward(w: WeightVector, z):
    """Evaluate the network at `z` (a d_in vector or an (n, d_in) batch)."""
    zz, single = _check_input(w.arch, z)
    w1, b1, w2, b2 = w.unpack()
    out = np.tanh(zz @ w1.T + b1) @ w2.T + b2
    return out[0] if single else out


def weight_jacobian(w: WeightVector, z):
    """Partials of every output coordinate with respect to every weight.

    Returns a (d_out, s) matrix for a single input or an (n, d_out, s) array
    for a batch; column k is the d_out-vector of partials with respect to
    weight k of the flat layout.
    """
    zz, single = _check_input(w.arch, z)
    arch = w.arch
    w1, b1, w2, b2 = w.unpack()
    n = zz.shape[0]
    h, di, do = arch.hidden_units, arch.input_dim, arch.output_dim

    act = np.tanh(zz @ w1.T + b1)        # (n, h)
    dact = 1.0 - act ** 2                # (n, h)

    jac = np.zeros((n, do, arch.n_params))
    # hidden weights: dF_i/dW1[j,p] = W2[i,j] * dact_j * z_p
    jac[:, :, arch.hidden_weight_slice] = np.einsum(
        "ij,tj,tp->tijp", w2, dact, zz
    ).reshape(n, do, h * di)
    # hidden biases: dF_i/db1[j] = W2[i,j] * dact_j
    jac[:, :, arch.hidden_bias_slice] = np.einsum("ij,tj->tij", w2, dact)
    # output weights: dF_i/dW2[i,j] = act_j
    ow = arch.output_weight_slice.start
    for i in range(do):
        jac[:, i, ow + i * h: ow + (i + 1) * h] = act
    # output biases: dF_i/db2[i] = 1
    ob = arch.output_bias_slice.start
    for i in range(do):
        jac[:, i, ob + i] = 1.0
    return jac[0] if single else jac


def second_derivative_tensor(w: WeightVector, z):
    """Full second-derivative tensor d2F/dW_k dW_l.

    Returns (d_out, s, s) for a single input or (n, d_out, s, s) for a
    batch.  Only hidden-layer pairs within one unit and (hidden, output
    weight of the same unit) pairs are ever nonzero.
    """
    zz, single = _check_input(w.arch, z)
    arch = w.arch
    w1, b1, w2, b2 = w.unpack()
    n = zz.shape[0]
    h, di, do = arch.hidden_units, arch.input_dim, arch.output_dim
    s = arch.n_params

    act = np.tanh(zz @ w1.T + b1)
    dact = 1.0 - act ** 2
    d2act = -2.0 * act * dact

    ones = np.ones((n, 1))
    tensor = np.zeros((n, do, s, s))
    ow = arch.output_weight_slice.start
    hb = arch.hidden_bias_slice.start
    for j in range(h):
        # per-unit hidden parameter indices and their input factors (z, then 1)
        idx = np.concatenate([np.arange(j * di, (j + 1) * di), [hb + j]])
        x = np.concatenate([zz, ones], axis=1)  # (n, di+1)
        # hidden-hidden block: W2[i,j] * d2act_j * x_k * x_l
        block = np.einsum("i,t,tk,tl->tikl", w2[:, j], d2act[:, j], x, x)
        tensor[:, :, idx[:, None], idx[None, :]] = block
        # mixed block with the unit's outgoing weights: e_i * dact_j * x_k
        mixed = np.einsum("t,tk->tk", dact[:, j], x)  # (n, di+1)
        for i in range(do):
            col = ow + i * h + j
            tensor[:, i, idx, col] = mixed
            tensor[:, i, col, idx] = mixed
    return tensor[0] if single else tensor


def weight_second_derivative(w: WeightVector, z, k, l):
    """d2 F / dW_k dW_l as a d_out-vector (symmetric in k and l)."""
    s = w.arch.n_params
    if not (0 <= k < s and 0 <= l < s):
        raise IndexError(f"weight indices ({k}, {l}) out of range for s={s}")
    tensor = second_derivative_tensor(w, z)
    return tensor[..., k, l]


def apply_mask(w: WeightVector, mask: ParameterMask):
    """Zero every pinned coordinate, leaving free coordinates untouched."""
    if mask.arch != w.arch:
        raise ArchMismatch("mask architecture does not match weights")
    values = np.where(mask.free, w.values, 0.0)
    return WeightVector(w.arch, values, w.box_radius)


def canonicalize(w: WeightVector):
    """Map `w` to the canonical representative of its symmetry class.

    Hidden-unit permutations and per-unit sign flips of (input weights, bias,
    outgoing weights) leave the network function unchanged.  The
    representative is fixed by (a) flipping any unit whose first nonzero
    entry of (input weights..., bias) is negative and (b) sorting units
    lexicographically by that key.
    """
    w1, b1, w2, b2 = (a.copy() for a in w.unpack())
    h = w.arch.hidden_units
    for j in range(h):
        key = np.concatenate([w1[j], [b1[j]]])
        nonzero = np.nonzero(key)[0]
        if nonzero.size and key[nonzero[0]] < 0:
            w1[j] = -w1[j]
            b1[j] = -b1[j]
            w2[:, j] = -w2[:, j]
    order = sorted(range(h), key=lambda j: tuple(np.concatenate([w1[j], [b1[j]]])))
    w1 = w1[order]
    b1 = b1[order]
    w2 = w2[:, order]
    return WeightVector(w.arch, w.arch.pack(w1, b1, w2, b2), w.box_radius)


def random_init(arch: MLPArchitecture, mask: ParameterMask, seed):
    """Uniform draw on [-0.7, 0.7] for free coordinates, zero elsewhere.

    The narrow range keeps initial preactivations inside tanh's responsive
    region for standardized inputs.
    """
    rng = np.random.default_rng(seed)
    values = rng.uniform(-INIT_HALF_WIDTH, INIT_HALF_WIDTH, size=arch.n_params)
    values[~mask.free] = 0.0
    return WeightVector(arch, values)

"""Binary checkpoints for policies and kernel models.

Layout (all little-endian)::

    offset  type        field
    0       4 bytes     magic b"BQPG"
    4       u16         format version (1)
    6       u16         kind (1 = policy, 2 = kernel)
    8       u32         number of header integers  (I)
    12      u32         number of header floats    (F)
    16      I x i64     header integers
    ..      F x f64     header floats
    ..      u64         number of parameters (P)
    ..      P x f64     flat parameter vector

Policy header integers: ``state_dim, action_dim, n_hidden, *hidden_sizes``.
Kernel header integers: ``state_dim, n_hidden, *feature_hidden, grid_size,
route (0 = truncated_svd, 1 = jacobian_products), fisher_rank (-1 = auto)``
with ``n_hidden = -1`` for the identity feature map; kernel header floats:
``c1, c2, sigma2, fisher_damping``.
"""

import struct

import numpy as np

from .errors import InputError
from .kernels import FISHER_ROUTES, DeepRBFKernel, KernelModel
from .nn import MLP
from .policy import GaussianMLPPolicy

MAGIC = b"BQPG"
VERSION = 1
KIND_POLICY, KIND_KERNEL = 1, 2


def _pack(kind, ints, floats, params):
    params = np.ascontiguousarray(params, dtype="<f8")
    head = MAGIC + struct.pack("<HHII", VERSION, kind, len(ints), len(floats))
    head += struct.pack(f"<{len(ints)}q", *ints) + struct.pack(f"<{len(floats)}d", *floats)
    return head + struct.pack("<Q", params.size) + params.tobytes()


def _unpack(blob):
    if blob[:4] != MAGIC:
        raise InputError("not a checkpoint file (bad magic)")
    version, kind, ni, nf = struct.unpack_from("<HHII", blob, 4)
    if version != VERSION:
        raise InputError(f"unsupported checkpoint version {version}")
    off = 16
    ints = struct.unpack_from(f"<{ni}q", blob, off)
    off += 8 * ni
    floats = struct.unpack_from(f"<{nf}d", blob, off)
    off += 8 * nf
    (n,) = struct.unpack_from("<Q", blob, off)
    off += 8
    if len(blob) != off + 8 * n:
        raise InputError("truncated or oversized checkpoint")
    return kind, list(ints), list(floats), np.frombuffer(blob, "<f8", n, off).astype(float)


def read_checkpoint(path):
    with open(path, "rb") as fh:
        return _unpack(fh.read())


def policy_bytes(policy: GaussianMLPPolicy):
    ints = [policy.state_dim, policy.action_dim, len(policy.hidden_sizes), *policy.hidden_sizes]
    return _pack(KIND_POLICY, ints, [], policy.get_theta())


def policy_from_bytes(blob) -> GaussianMLPPolicy:
    kind, ints, _, params = _unpack(blob)
    if kind != KIND_POLICY:
        raise InputError("checkpoint does not hold a policy")
    sd, ad, nh = ints[:3]
    return GaussianMLPPolicy(sd, ad, tuple(ints[3:3 + nh]), theta=params)


def kernel_bytes(model: KernelModel):
    sk = model.state_kernel
    hidden = [] if sk.feature_net is None else list(sk.feature_net.sizes[1:])
    ints = [sk.state_dim, len(hidden) if sk.feature_net is not None else -1, *hidden, model.grid_size,
            FISHER_ROUTES.index(model.fisher_route), -1 if model.fisher_rank is None else model.fisher_rank]
    floats = [model.c1, model.c2, model.sigma2, model.fisher_damping]
    return _pack(KIND_KERNEL, ints, floats, sk.get_params())


def kernel_from_bytes(blob) -> KernelModel:
    kind, ints, floats, params = _unpack(blob)
    if kind != KIND_KERNEL:
        raise InputError("checkpoint does not hold a kernel model")
    sd, nh = ints[:2]
    hidden = ints[2:2 + max(nh, 0)]
    grid, route, rank = ints[2 + max(nh, 0):5 + max(nh, 0)]
    net = MLP((sd, *hidden), "tanh") if nh >= 0 else None
    c1, c2, s2, damp = floats
    return KernelModel(DeepRBFKernel(sd, net, params), c1, c2, s2, grid, FISHER_ROUTES[route],
                       None if rank < 0 else rank, damp)


def save_policy(path, policy):
    with open(path, "wb") as fh:
        fh.write(policy_bytes(policy))


def load_policy(path) -> GaussianMLPPolicy:
    with open(path, "rb") as fh:
        return policy_from_bytes(fh.read())


def save_kernel(path, model):
    with open(path, "wb") as fh:
        fh.write(kernel_bytes(model))


def load_kernel(path) -> KernelModel:
    with open(path, "rb") as fh:
        return kernel_from_bytes(fh.read())

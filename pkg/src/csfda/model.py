"""Feature extractor, bottleneck classifier and projection head; teacher/student pair.

Parameter names are stable and appear verbatim in checkpoints::

    g.{i}.w, g.{i}.b            hidden linear layers of the feature extractor
    bn.{i}.scale, bn.{i}.shift  their batch norms (running stats: bn.{i}.mean / bn.{i}.var)
    neck.w, neck.b              bottleneck linear
    bn.neck.scale, ...          bottleneck batch norm
    cls.w, cls.b                classifier
    proj.{i}.w, proj.{i}.b      projection head
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Literal

import numpy as np

from csfda import numkit as nk
from csfda.errors import ArchitectureMismatch, ShapeMismatch
from csfda.numkit import Tensor

Mode = Literal["train", "eval"]


@dataclass(frozen=True)
class NetworkConfig:
    input_dim: int = 2
    hidden_dims: tuple[int, ...] = (64, 64)
    bottleneck_dim: int = 32
    num_classes: int = 4
    proj_hidden: int = 64
    proj_dim: int = 32
    bn_momentum: float = 0.1
    seed: int = 0

    @property
    def feature_dim(self) -> int:
        return self.hidden_dims[-1]


def _kaiming_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


class Network:
    """MLP feature extractor G -> bottleneck -> classifier C, plus projection head H."""

    def __init__(self, config: NetworkConfig = NetworkConfig()):
        self.config = config
        rng = np.random.default_rng(config.seed)
        self.params: dict[str, Tensor] = {}
        self.buffers: dict[str, np.ndarray] = {}

        dims = (config.input_dim, *config.hidden_dims)
        for i, (fan_in, fan_out) in enumerate(zip(dims[:-1], dims[1:])):
            self._linear(f"g.{i}", rng, fan_in, fan_out)
            self._bn(f"bn.{i}", fan_out)
        self._linear("neck", rng, config.feature_dim, config.bottleneck_dim)
        self._bn("bn.neck", config.bottleneck_dim)
        self._linear("cls", rng, config.bottleneck_dim, config.num_classes)
        self._linear("proj.0", rng, config.feature_dim, config.proj_hidden)
        self._linear("proj.1", rng, config.proj_hidden, config.proj_dim)

    def _linear(self, prefix: str, rng, fan_in: int, fan_out: int) -> None:
        self.params[f"{prefix}.w"] = Tensor(_kaiming_uniform(rng, fan_in, fan_out), requires_grad=True)
        self.params[f"{prefix}.b"] = Tensor(np.zeros(fan_out), requires_grad=True)

    def _bn(self, prefix: str, width: int) -> None:
        self.params[f"{prefix}.scale"] = Tensor(np.ones(width), requires_grad=True)
        self.params[f"{prefix}.shift"] = Tensor(np.zeros(width), requires_grad=True)
        self.buffers[f"{prefix}.mean"] = np.zeros(width)
        self.buffers[f"{prefix}.var"] = np.ones(width)

    # -- forward pieces ----------------------------------------------------
    def _apply_linear(self, prefix: str, h: Tensor) -> Tensor:
        return nk.add(nk.matmul(h, self.params[f"{prefix}.w"]), self.params[f"{prefix}.b"])

    def _apply_bn(self, prefix: str, h: Tensor, training: bool) -> Tensor:
        return nk.batchnorm(
            h,
            self.params[f"{prefix}.scale"],
            self.params[f"{prefix}.shift"],
            self.buffers[f"{prefix}.mean"],
            self.buffers[f"{prefix}.var"],
            training=training,
            momentum=self.config.bn_momentum,
        )

    def _check_input(self, x) -> Tensor:
        x = nk.as_tensor(x)
        if x.ndim != 2 or x.shape[1] != self.config.input_dim:
            raise ShapeMismatch(f"expected [batch, {self.config.input_dim}] input, got {x.shape}")
        return x

    def features(self, x, mode: Mode = "eval") -> Tensor:
        """G(x)."""
        h = self._check_input(x)
        training = mode == "train"
        for i in range(len(self.config.hidden_dims)):
            h = nk.relu(self._apply_bn(f"bn.{i}", self._apply_linear(f"g.{i}", h), training))
        return h

    def head(self, feats: Tensor, mode: Mode = "eval") -> Tensor:
        """C(bottleneck(feats)) as logits."""
        z = self._apply_bn("bn.neck", self._apply_linear("neck", feats), mode == "train")
        return self._apply_linear("cls", z)

    def logits(self, x, mode: Mode = "eval") -> Tensor:
        return self.head(self.features(x, mode), mode)

    def predict(self, x, mode: Mode = "eval") -> Tensor:
        return nk.softmax(self.logits(x, mode), axis=1)

    def project_features(self, feats: Tensor) -> Tensor:
        h = nk.relu(self._apply_linear("proj.0", feats))
        return nk.l2_normalize(self._apply_linear("proj.1", h), axis=1)

    def project(self, x, mode: Mode = "eval") -> Tensor:
        """Unit-norm projections H(G(x))."""
        return self.project_features(self.features(x, mode))

    # -- state ---------------------------------------------------------------
    def state_dict(self) -> dict[str, np.ndarray]:
        state = {k: p.data.copy() for k, p in self.params.items()}
        state.update({k: b.copy() for k, b in self.buffers.items()})
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        expected = set(self.params) | set(self.buffers)
        if set(state) != expected:
            missing = sorted(expected - set(state))
            extra = sorted(set(state) - expected)
            raise ArchitectureMismatch(f"state mismatch; missing={missing} unexpected={extra}")
        for k, p in self.params.items():
            if state[k].shape != p.shape:
                raise ArchitectureMismatch(f"{k}: shape {state[k].shape} != {p.shape}")
            p.data[...] = state[k]
        for k, b in self.buffers.items():
            if state[k].shape != b.shape:
                raise ArchitectureMismatch(f"{k}: shape {state[k].shape} != {b.shape}")
            b[...] = state[k]

    def copy(self) -> "Network":
        twin = Network(self.config)
        twin.load_state_dict(self.state_dict())
        return twin

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


@dataclass
class UpdateMask:
    """Which parameters an optimizer may touch."""

    mode: Literal["all", "bn_only"]
    trainable: frozenset[str] = field(default_factory=frozenset)

    @classmethod
    def for_network(cls, net: Network, mode: Literal["all", "bn_only"] = "all") -> "UpdateMask":
        if mode == "all":
            names = frozenset(net.params)
        elif mode == "bn_only":
            names = frozenset(
                k for k in net.params if k.startswith("bn.") and k.endswith((".scale", ".shift"))
            )
        else:
            raise ValueError(f"unknown mask mode {mode!r}")
        return cls(mode, names)

    def select(self, net: Network) -> dict[str, Tensor]:
        return {k: p for k, p in net.params.items() if k in self.trainable}


class ModelPair:
    """Student network trained by SGD and its EMA teacher."""

    def __init__(self, student: Network, ema_decay: float = 0.98, teacher: Network | None = None):
        if not 0.0 <= ema_decay <= 1.0:
            raise ValueError("ema_decay must lie in [0, 1]")
        self.student = student
        self.ema_decay = ema_decay
        self.teacher = student.copy() if teacher is None else teacher
        self._check_arch()
        for p in self.teacher.params.values():
            p.requires_grad = False

    def _check_arch(self) -> None:
        s, t = self.student, self.teacher
        if set(s.params) != set(t.params) or set(s.buffers) != set(t.buffers):
            raise ArchitectureMismatch("student and teacher differ in parameter names")
        for k in s.params:
            if s.params[k].shape != t.params[k].shape:
                raise ArchitectureMismatch(f"{k}: {s.params[k].shape} vs {t.params[k].shape}")
        for k in s.buffers:
            if s.buffers[k].shape != t.buffers[k].shape:
                raise ArchitectureMismatch(f"{k}: {s.buffers[k].shape} vs {t.buffers[k].shape}")

    def ema_update(self) -> None:
        """teacher <- decay * teacher + (1 - decay) * student, buffers included."""
        self._check_arch()
        g = self.ema_decay
        for k, tp in self.teacher.params.items():
            tp.data[...] = g * tp.data + (1.0 - g) * self.student.params[k].data
        for k, tb in self.teacher.buffers.items():
            tb[...] = g * tb + (1.0 - g) * self.student.buffers[k]

    def clone_student_to_teacher(self) -> None:
        for k, tp in self.teacher.params.items():
            tp.data[...] = self.student.params[k].data
        for k, tb in self.teacher.buffers.items():
            tb[...] = self.student.buffers[k]

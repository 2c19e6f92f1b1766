"""
Layers, the skip-connected denoising autoencoder, the target classifiers and
the checkpoint format.
"""

import json
import struct
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from scripts import tensor_autodiff as ops
from scripts.config import dataset_defaults
from scripts.exceptions import CheckpointError, ConfigurationError, DimensionError
from scripts.tensor_autodiff import Tensor, no_grad


class Module:
    """Base class: walks attributes in declaration order to find parameters and buffers."""

    buffer_names = ()

    def __init__(self):
        self.training = True

    def forward(self, x):
        raise NotImplementedError

    def __call__(self, x):
        return self.forward(x)

    def _children(self):
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for index, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{name}.{index}", item

    def named_parameters(self, prefix=""):
        for name, value in vars(self).items():
            if isinstance(value, Tensor):
                yield prefix + name, value
        for name, child in self._children():
            yield from child.named_parameters(f"{prefix}{name}.")

    def named_buffers(self, prefix=""):
        for name in self.buffer_names:
            yield prefix + name, getattr(self, name)
        for name, child in self._children():
            yield from child.named_buffers(f"{prefix}{name}.")

    def parameters(self):
        return [param for _, param in self.named_parameters()]

    def train(self, mode=True):
        self.training = mode
        for _, child in self._children():
            child.train(mode)
        return self

    def eval(self):
        return self.train(False)

    def requires_grad_(self, flag=True):
        for param in self.parameters():
            param.requires_grad = flag
        return self

    def zero_grad(self):
        for param in self.parameters():
            param.zero_grad()

    def state_dict(self):
        """Parameters then buffers, in declaration order."""
        state = {name: param.data for name, param in self.named_parameters()}
        state.update({name: buffer for name, buffer in self.named_buffers()})
        return state

    def load_state_dict(self, state):
        expected = self.state_dict()
        if list(expected) != list(state):
            raise CheckpointError(f"State names differ: expected {list(expected)[:4]}..., got {list(state)[:4]}...")
        for (name, param) in self.named_parameters():
            param.data = _checked_copy(name, param.data, state[name])
        for (name, buffer) in self.named_buffers():
            buffer[...] = _checked_copy(name, buffer, state[name])


def _checked_copy(name, current, incoming):
    incoming = np.asarray(incoming, dtype=np.float32)
    if incoming.shape != current.shape:
        raise CheckpointError(f"Shape mismatch for {name}: expected {current.shape}, got {incoming.shape}")
    return incoming.copy()


def _he_normal(rng, shape, fan_in):
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(np.float32)


class Conv2d(Module):
    def __init__(self, in_channels, out_channels, kernel_size, stride=1, padding=0, bias=True, rng=None):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        self.stride = stride
        self.padding = padding
        self.weight = Tensor(
            _he_normal(rng, (out_channels, in_channels, kernel_size, kernel_size), in_channels * kernel_size ** 2),
            requires_grad=True,
        )
        self.bias = Tensor(np.zeros(out_channels), requires_grad=True) if bias else None

    def forward(self, x):
        out = ops.conv2d(x, self.weight, self.stride, self.padding)
        if self.bias is not None:
            out = out + self.bias.reshape(1, -1, 1, 1)
        return out


class ConvTranspose2d(Module):
    def __init__(self, in_channels, out_channels, kernel_size, stride=1, padding=0, output_padding=0, rng=None):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        self.stride = stride
        self.padding = padding
        self.output_padding = output_padding
        self.weight = Tensor(
            _he_normal(rng, (in_channels, out_channels, kernel_size, kernel_size), in_channels * kernel_size ** 2),
            requires_grad=True,
        )
        self.bias = Tensor(np.zeros(out_channels), requires_grad=True)

    def forward(self, x):
        out = ops.deconv2d(x, self.weight, self.stride, self.padding, self.output_padding)
        return out + self.bias.reshape(1, -1, 1, 1)


class BatchNorm2d(Module):
    buffer_names = ("running_mean", "running_var")

    def __init__(self, num_features, momentum=0.1, eps=1e-5):
        super().__init__()
        self.momentum = momentum
        self.eps = eps
        self.gamma = Tensor(np.ones(num_features), requires_grad=True)
        self.beta = Tensor(np.zeros(num_features), requires_grad=True)
        self.running_mean = np.zeros(num_features, dtype=np.float32)
        self.running_var = np.ones(num_features, dtype=np.float32)

    def forward(self, x):
        return ops.batchnorm2d(
            x, self.gamma, self.beta, self.running_mean, self.running_var,
            training=self.training, momentum=self.momentum, eps=self.eps,
        )


class Linear(Module):
    def __init__(self, in_features, out_features, rng=None):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        self.weight = Tensor(_he_normal(rng, (in_features, out_features), in_features), requires_grad=True)
        self.bias = Tensor(np.zeros(out_features), requires_grad=True)

    def forward(self, x):
        return ops.matmul(x, self.weight) + self.bias


class EncoderBlock(Module):
    """Conv2d + ReLU + BatchNorm2d (+ dropout)."""

    def __init__(self, in_channels, out_channels, stride, dropout, rng):
        super().__init__()
        self.conv = Conv2d(in_channels, out_channels, 3, stride=stride, padding=1, rng=rng)
        self.norm = BatchNorm2d(out_channels)
        self.dropout = dropout
        self._rng = rng

    def forward(self, x):
        out = self.norm(ops.relu(self.conv(x)))
        return ops.dropout(out, self.dropout, self._rng, self.training)


class DecoderBlock(Module):
    """DeConv2d + ReLU + BatchNorm2d (+ dropout)."""

    def __init__(self, channels, dropout, rng):
        super().__init__()
        self.deconv = ConvTranspose2d(channels, channels, 3, stride=1, padding=1, rng=rng)
        self.norm = BatchNorm2d(channels)
        self.dropout = dropout
        self._rng = rng

    def forward(self, x):
        out = self.norm(ops.relu(self.deconv(x)))
        return ops.dropout(out, self.dropout, self._rng, self.training)


class DaeModel(Module):
    """
    Fully convolutional denoising autoencoder with symmetric skip connections.

    The first encoder block halves the resolution, the rest keep it; the
    decoder mirrors this and its last block doubles the resolution back to
    ``channels`` maps followed by a sigmoid. Encoder feature map k is added to
    the output of the decoder block at the same depth, and the raw input is
    added before the final sigmoid.

    Args:
        channels (int): Image channels (1 for MNIST, 3 for CIFAR-10).
        depth (int): Blocks per side (5 for MNIST, 15 for CIFAR-10).
        width (int): Feature maps per hidden block.
        dropout (float): Dropout rate after every hidden block.
        skip_connections (bool): Disable to sever every skip path.
        seed (int): Weight initialisation seed.
    """

    kind = "dae"

    def __init__(self, channels, depth, width=64, dropout=0.0, skip_connections=True, seed=0):
        super().__init__()
        if depth < 1:
            raise ConfigurationError(f"DAE depth must be >= 1, got {depth}")
        self.channels = channels
        self.depth = depth
        self.width = width
        self.dropout_rate = dropout
        self.skip_connections = skip_connections
        self.seed = seed
        rng = np.random.default_rng(seed)
        self.encoder_layers = [EncoderBlock(channels, width, 2, dropout, rng)] + [
            EncoderBlock(width, width, 1, dropout, rng) for _ in range(depth - 1)
        ]
        self.decoder_layers = [DecoderBlock(width, dropout, rng) for _ in range(depth - 1)]
        self.output_layer = ConvTranspose2d(width, channels, 3, stride=2, padding=1, output_padding=1, rng=rng)

    def config(self):
        return {
            "channels": self.channels,
            "depth": self.depth,
            "width": self.width,
            "dropout": self.dropout_rate,
            "skip_connections": self.skip_connections,
            "seed": self.seed,
        }

    def forward(self, x):
        x = ops.as_tensor(x)
        if x.ndim != 4:
            raise DimensionError(f"DAE input must be [N,C,H,W], got {x.shape}")
        if x.shape[1] != self.channels:
            raise DimensionError(f"DAE channel axis (1) is {x.shape[1]}, model expects {self.channels}")
        for axis in (2, 3):
            if x.shape[axis] % 2:
                name = "height" if axis == 2 else "width"
                raise DimensionError(f"DAE {name} axis ({axis}) must be even, got {x.shape[axis]}")

        features = [x]
        hidden = x
        for block in self.encoder_layers:
            hidden = block(hidden)
            features.append(hidden)
        for index, block in enumerate(self.decoder_layers):
            hidden = block(hidden)
            if self.skip_connections:
                hidden = hidden + features[self.depth - 1 - index]
        hidden = self.output_layer(hidden)
        if self.skip_connections:
            hidden = hidden + x
        return ops.sigmoid(hidden)


class ClassifierModel(Module):
    """Maps [N, C, H, W] images in [0, 1] to [N, num_classes] logits."""

    num_classes = 10

    def predict(self, images, batch_size=256):
        """Arg-max labels for an array of images, computed without a graph."""
        images = images.data if isinstance(images, Tensor) else np.asarray(images, dtype=np.float32)
        predictions = []
        with frozen(self), no_grad():
            for start in range(0, images.shape[0], batch_size):
                logits = self(Tensor(images[start:start + batch_size]))
                predictions.append(logits.data.argmax(axis=1))
        if not predictions:
            return np.zeros(0, dtype=np.int64)
        return np.concatenate(predictions)


class MnistClassifier(ClassifierModel):
    """Two conv/max-pool blocks (32, 64 maps) and two dense layers."""

    kind = "mnist_classifier"

    def __init__(self, num_classes=10, seed=0):
        super().__init__()
        self.num_classes = num_classes
        self.seed = seed
        rng = np.random.default_rng(seed)
        self.conv1 = Conv2d(1, 32, 3, padding=1, rng=rng)
        self.conv2 = Conv2d(32, 64, 3, padding=1, rng=rng)
        self.fc1 = Linear(64 * 7 * 7, 128, rng=rng)
        self.fc2 = Linear(128, num_classes, rng=rng)

    def config(self):
        return {"num_classes": self.num_classes, "seed": self.seed}

    def forward(self, x):
        out = ops.max_pool2d(ops.relu(self.conv1(x)))
        out = ops.max_pool2d(ops.relu(self.conv2(out)))
        out = ops.relu(self.fc1(ops.flatten(out)))
        return self.fc2(out)


class ResidualBlock(Module):
    def __init__(self, in_channels, out_channels, stride, rng):
        super().__init__()
        self.conv1 = Conv2d(in_channels, out_channels, 3, stride=stride, padding=1, bias=False, rng=rng)
        self.norm1 = BatchNorm2d(out_channels)
        self.conv2 = Conv2d(out_channels, out_channels, 3, padding=1, bias=False, rng=rng)
        self.norm2 = BatchNorm2d(out_channels)
        self.shortcut = None
        if stride != 1 or in_channels != out_channels:
            self.shortcut = [Conv2d(in_channels, out_channels, 1, stride=stride, bias=False, rng=rng), BatchNorm2d(out_channels)]

    def forward(self, x):
        out = ops.relu(self.norm1(self.conv1(x)))
        out = self.norm2(self.conv2(out))
        identity = x
        if self.shortcut is not None:
            conv, norm = self.shortcut
            identity = norm(conv(x))
        return ops.relu(out + identity)


class CifarResNet(ClassifierModel):
    """Three stages of residual blocks with global average pooling."""

    kind = "cifar_resnet"

    def __init__(self, num_classes=10, widths=(16, 32, 64), blocks_per_stage=2, seed=0):
        super().__init__()
        self.num_classes = num_classes
        self.widths = tuple(widths)
        self.blocks_per_stage = blocks_per_stage
        self.seed = seed
        rng = np.random.default_rng(seed)
        self.stem = Conv2d(3, widths[0], 3, padding=1, bias=False, rng=rng)
        self.stem_norm = BatchNorm2d(widths[0])
        blocks = []
        in_channels = widths[0]
        for stage, width in enumerate(widths):
            for index in range(blocks_per_stage):
                stride = 2 if stage > 0 and index == 0 else 1
                blocks.append(ResidualBlock(in_channels, width, stride, rng))
                in_channels = width
        self.blocks = blocks
        self.head = Linear(in_channels, num_classes, rng=rng)

    def config(self):
        return {
            "num_classes": self.num_classes,
            "widths": list(self.widths),
            "blocks_per_stage": self.blocks_per_stage,
            "seed": self.seed,
        }

    def forward(self, x):
        out = ops.relu(self.stem_norm(self.stem(x)))
        for block in self.blocks:
            out = block(out)
        return self.head(ops.mean(out, axis=(2, 3)))


MODEL_KINDS = {cls.kind: cls for cls in (DaeModel, MnistClassifier, CifarResNet)}


def build_dae(dataset, seed=0, **overrides):
    defaults = dataset_defaults(dataset)
    kwargs = {"channels": defaults["channels"], "depth": defaults["dae_depth"], "seed": seed}
    kwargs.update(overrides)
    return DaeModel(**kwargs)


def build_classifier(dataset, seed=0):
    if dataset == "mnist":
        return MnistClassifier(seed=seed)
    if dataset == "cifar10":
        return CifarResNet(seed=seed)
    raise ConfigurationError(f"No classifier defined for dataset '{dataset}'")


def dae_forward(model, x):
    return model(x)


def classifier_forward(model, x):
    return model(x)


@contextmanager
def frozen(*modules):
    """Eval mode with parameters excluded from gradient accumulation; restored on exit."""
    saved = [(module, module.training, [p.requires_grad for p in module.parameters()]) for module in modules]
    for module in modules:
        module.eval()
        module.requires_grad_(False)
    try:
        yield
    finally:
        for module, training, flags in saved:
            module.train(training)
            for param, flag in zip(module.parameters(), flags):
                param.requires_grad = flag


class ModelCheckpoint:
    """
    Binary checkpoint: header, JSON manifest, then little-endian float32 blobs.

    Layout: magic (4 bytes) | format version (uint32) | manifest length (uint32)
    | manifest | parameters and batch-norm buffers in declaration order.
    """

    MAGIC = b"PLCK"
    VERSION = 1
    _HEADER = struct.Struct("<4sII")

    @classmethod
    def save(cls, model, path):
        state = model.state_dict()
        manifest = {
            "kind": model.kind,
            "config": model.config(),
            "tensors": [[name, list(array.shape)] for name, array in state.items()],
        }
        manifest_bytes = json.dumps(manifest, sort_keys=True).encode("utf-8")
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "wb") as handle:
            handle.write(cls._HEADER.pack(cls.MAGIC, cls.VERSION, len(manifest_bytes)))
            handle.write(manifest_bytes)
            for array in state.values():
                handle.write(np.asarray(array, dtype="<f4").tobytes())
        return path

    @classmethod
    def load(cls, path, expected_kind=None):
        path = Path(path)
        if not path.exists():
            raise ConfigurationError(f"Checkpoint {path} does not exist")
        raw = path.read_bytes()
        if len(raw) < cls._HEADER.size:
            raise CheckpointError(f"{path}: truncated header")
        magic, version, manifest_length = cls._HEADER.unpack_from(raw)
        if magic != cls.MAGIC:
            raise CheckpointError(f"{path}: bad magic {magic!r}")
        if version != cls.VERSION:
            raise CheckpointError(f"{path}: unsupported format version {version}")
        offset = cls._HEADER.size
        manifest = json.loads(raw[offset:offset + manifest_length].decode("utf-8"))
        offset += manifest_length
        kind = manifest.get("kind")
        if kind not in MODEL_KINDS:
            raise CheckpointError(f"{path}: unknown model kind '{kind}'")
        if expected_kind is not None and kind != expected_kind:
            raise CheckpointError(f"{path}: holds a '{kind}' model, expected '{expected_kind}'")

        model = MODEL_KINDS[kind](**manifest["config"])
        state = {}
        for name, shape in manifest["tensors"]:
            count = int(np.prod(shape))
            end = offset + 4 * count
            if end > len(raw):
                raise CheckpointError(f"{path}: truncated while reading {name}")
            state[name] = np.frombuffer(raw, dtype="<f4", count=count, offset=offset).reshape(shape)
            offset = end
        if offset != len(raw):
            raise CheckpointError(f"{path}: {len(raw) - offset} trailing bytes")
        model.load_state_dict(state)
        return model.eval()

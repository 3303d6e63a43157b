"""Classifier architectures, the trainer used for pretraining and Retrain, and checkpoint files."""
import copy
import csv
import hashlib
import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch, message="non-finite training loss"):
        super().__init__(f"{message} at epoch {epoch}")
        self.epoch = epoch


class SmallCNN(nn.Module):
    def __init__(self, in_channels=3, num_classes=10, width=16, image_size=16, blocks=2):
        super().__init__()
        layers = []
        c = in_channels
        for i in range(blocks):
            out = width * (2**i)
            layers += [nn.Conv2d(c, out, 3, padding=1), nn.ReLU(), nn.MaxPool2d(2)]
            c = out
        self.features = nn.Sequential(*layers)
        side = image_size // (2**blocks)
        self.head = nn.Sequential(nn.Flatten(), nn.Linear(c * side * side, 128), nn.ReLU(),
                                  nn.Linear(128, num_classes))

    def forward(self, x):
        return self.head(self.features(x))


class MLP(nn.Module):
    def __init__(self, in_features, num_classes, hidden=(64,)):
        super().__init__()
        layers = [nn.Flatten()]
        d = in_features
        for h in hidden:
            layers += [nn.Linear(d, h), nn.ReLU()]
            d = h
        layers.append(nn.Linear(d, num_classes))
        self.net = nn.Sequential(*layers)

    def forward(self, x):
        return self.net(x)


def _resnet18(in_channels, num_classes):
    from torchvision.models import resnet18

    net = resnet18(num_classes=num_classes)
    net.conv1 = nn.Conv2d(in_channels, 64, 3, 1, 1, bias=False)
    net.maxpool = nn.Identity()
    return net


def build_architecture(architecture_id, input_shape, num_classes, **kwargs):
    input_shape = tuple(input_shape)
    if architecture_id == "smallcnn":
        return SmallCNN(input_shape[0], num_classes, image_size=input_shape[-1], **kwargs)
    if architecture_id == "mlp":
        return MLP(int(np.prod(input_shape)), num_classes, **kwargs)
    if architecture_id == "linear":
        return MLP(int(np.prod(input_shape)), num_classes, hidden=())
    if architecture_id == "resnet18":
        return _resnet18(input_shape[0], num_classes)
    raise ValueError(f"unknown architecture {architecture_id!r}")


def digest_of(obj):
    blob = json.dumps(obj, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class TrainConfig:
    architecture: str = "smallcnn"
    epochs: int = 40
    lr: float = 0.05
    batch_size: int = 128
    momentum: float = 0.9
    weight_decay: float = 0.0
    seed: int = 0
    arch_kwargs: dict = field(default_factory=lambda: {"width": 16})

    @property
    def digest(self):
        return digest_of(asdict(self))


def parameter_vector(model):
    return torch.cat([p.detach().reshape(-1) for p in model.parameters()])


def parameter_checksum(model):
    h = hashlib.sha256()
    for p in model.parameters():
        h.update(p.detach().cpu().numpy().tobytes())
    return h.hexdigest()[:16]


class ClassifierCheckpoint:
    """A classifier plus the metadata that produced it."""

    def __init__(self, model, architecture_id, input_shape, num_classes, train_config_digest="",
                 rng_seed=0, arch_kwargs=None, parent=None):
        self.model = model
        self.architecture_id = architecture_id
        self.input_shape = tuple(input_shape)
        self.num_classes = num_classes
        self.train_config_digest = train_config_digest
        self.rng_seed = rng_seed
        self.arch_kwargs = dict(arch_kwargs or {})
        self.parent = parent

    def __call__(self, x):
        return self.model(x)

    @property
    def digest(self):
        return parameter_checksum(self.model)

    def clone(self):
        return ClassifierCheckpoint(copy.deepcopy(self.model), self.architecture_id, self.input_shape,
                                    self.num_classes, self.train_config_digest, self.rng_seed,
                                    self.arch_kwargs, parent=self.digest)

    @torch.no_grad()
    def logits(self, features, batch_size=1024):
        self.model.eval()
        x = torch.as_tensor(features)
        out = [self.model(x[i:i + batch_size]) for i in range(0, len(x), batch_size)]
        return torch.cat(out) if out else torch.zeros(0, self.num_classes)

    def manifest(self):
        return {
            "kind": "classifier",
            "architecture_id": self.architecture_id,
            "input_shape": list(self.input_shape),
            "num_classes": self.num_classes,
            "arch_kwargs": self.arch_kwargs,
            "seed": self.rng_seed,
            "config_digest": self.train_config_digest,
            "parent_checkpoint": self.parent,
            "param_digest": self.digest,
        }

    def save(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        torch.save(self.model.state_dict(), path)
        path.with_suffix(".json").write_text(json.dumps(self.manifest(), indent=2))
        return path

    @classmethod
    def load(cls, path):
        path = Path(path)
        meta = json.loads(path.with_suffix(".json").read_text())
        model = build_architecture(meta["architecture_id"], meta["input_shape"], meta["num_classes"],
                                   **meta.get("arch_kwargs", {}))
        model.load_state_dict(torch.load(path, weights_only=True))
        return cls(model, meta["architecture_id"], meta["input_shape"], meta["num_classes"],
                   meta.get("config_digest", ""), meta.get("seed", 0), meta.get("arch_kwargs"),
                   parent=meta.get("parent_checkpoint"))


def init_classifier(config, input_shape, num_classes):
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(config.seed)
        model = build_architecture(config.architecture, input_shape, num_classes, **config.arch_kwargs)
    return ClassifierCheckpoint(model, config.architecture, input_shape, num_classes, config.digest,
                                config.seed, config.arch_kwargs)


def per_sample_ce(model, features, labels):
    """Cross-entropy of every example against its label, as a tensor (keeps the graph)."""
    logits = model(torch.as_tensor(features))
    return F.cross_entropy(logits, torch.as_tensor(labels), reduction="none")


@torch.no_grad()
def per_sample_ce_numpy(ckpt, features, labels, batch_size=1024):
    logits = ckpt.logits(features, batch_size)
    return F.cross_entropy(logits, torch.as_tensor(labels), reduction="none").double().numpy()


def train_classifier(dataset, indices, config, log_path=None, eval_views=None):
    """Train from scratch on ``dataset`` rows ``indices``.

    Pretraining passes every training index; Retrain passes only the retain
    indices. Returns ``(checkpoint, log_rows)``.
    """
    indices = np.asarray(indices, dtype=np.int64)
    if len(indices) == 0:
        raise ValueError("cannot train on an empty view")
    ckpt = init_classifier(config, dataset.shape, dataset.num_classes)
    model = ckpt.model
    x_all = torch.from_numpy(dataset.features)
    y_all = torch.from_numpy(dataset.labels)
    opt = torch.optim.SGD(model.parameters(), lr=config.lr, momentum=config.momentum,
                          weight_decay=config.weight_decay)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, max(config.epochs, 1))
    rng = np.random.default_rng(config.seed)
    log = []
    start = time.perf_counter()
    for epoch in range(1, config.epochs + 1):
        model.train()
        order = indices[rng.permutation(len(indices))]
        total, correct, seen = 0.0, 0, 0
        for i in range(0, len(order), config.batch_size):
            b = torch.from_numpy(order[i:i + config.batch_size])
            logits = model(x_all[b])
            loss = F.cross_entropy(logits, y_all[b])
            if not torch.isfinite(loss):
                raise TrainingDiverged(epoch)
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(b)
            correct += (logits.argmax(1) == y_all[b]).sum().item()
            seen += len(b)
        sched.step()
        log.append({"epoch": epoch, "split": "train", "loss": total / seen,
                    "accuracy": 100.0 * correct / seen,
                    "wall_seconds": time.perf_counter() - start})
        for name, view in (eval_views or {}).items():
            losses = per_sample_ce_numpy(ckpt, *dataset.view(view))
            pred = ckpt.logits(dataset.features[view]).argmax(1).numpy()
            log.append({"epoch": epoch, "split": name, "loss": float(losses.mean()),
                        "accuracy": 100.0 * float((pred == dataset.labels[view]).mean()),
                        "wall_seconds": time.perf_counter() - start})
    model.eval()
    if log_path is not None:
        write_training_log(log, log_path)
    return ckpt, log


def write_training_log(rows, path):
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=["epoch", "split", "loss", "accuracy", "wall_seconds"])
        w.writeheader()
        w.writerows(rows)


def train_external_classifier(dataset, indices=None, config=None):
    """Classifier used to label generated images; trained on real data of the same label space."""
    if indices is None:
        indices = dataset.train_indices
    if config is None:
        arch = "smallcnn" if dataset.shape[-1] >= 8 else "mlp"
        kwargs = {"blocks": 1} if dataset.shape[-1] < 16 else {}
        config = TrainConfig(architecture=arch, epochs=30, lr=0.05, batch_size=64, arch_kwargs=kwargs)
    return train_classifier(dataset, indices, config)

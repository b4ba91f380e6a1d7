"""Context-conditioned mesh regressor.

A four-stage residual backbone maps a 224x224 image to a pooled feature that
an iterative-refinement head turns into body parameters. The per-instance
context (center maps or keypoint heatmaps) enters the network in one of four
ways:

* ``none``: ignored, the output is a function of the image alone;
* ``early``: concatenated with the image channels at the input;
* ``late``: concatenated with the stage-3 feature map;
* ``conorm``: a contextual normalization block after selected stages
  predicts a spatial affine modulation ``X' = sigma * X + beta`` of the
  features from the context.
"""

from dataclasses import asdict, dataclass

import torch
from torch import nn
import torch.nn.functional as F

from .body_model import NUM_BETAS, NUM_JOINTS, BodyParams
from .errors import ConfigError

FUSION_MODES = ("none", "early", "late", "conorm")
CONTEXT_CHANNELS = {"local": 1, "local+global": 2, "keypoints": 17}
RESNET50_WIDTHS = (256, 512, 1024, 2048)
INPUT_SIZE = 224
# mean weak-perspective scale of the toy scenes, focal / depth with depth ~ 5.4
MEAN_LOG_SCALE = -0.08


@dataclass
class ModelConfig:
    fusion_mode: str = "conorm"
    conorm_insertions: tuple = (1, 2, 3, 4)
    latent_dim: int = 128
    context: str = "local+global"
    backbone: str = "toy"  # "toy" or "resnet50"
    widths: tuple = (32, 64, 128, 256)
    blocks_per_stage: int = 1
    head_iterations: int = 3
    head_hidden: int = 512
    input_size: int = INPUT_SIZE

    def __post_init__(self):
        self.conorm_insertions = tuple(sorted(int(d) for d in self.conorm_insertions))
        self.widths = tuple(int(w) for w in self.widths)
        self.validate()

    def validate(self):
        if self.fusion_mode not in FUSION_MODES:
            raise ConfigError(f"fusion_mode must be one of {FUSION_MODES}, got {self.fusion_mode!r}")
        if self.context not in CONTEXT_CHANNELS:
            raise ConfigError(f"context must be one of {tuple(CONTEXT_CHANNELS)}, got {self.context!r}")
        if self.backbone not in ("toy", "resnet50"):
            raise ConfigError(f"unknown backbone {self.backbone!r}")
        if len(set(self.conorm_insertions)) != len(self.conorm_insertions) or not set(self.conorm_insertions) <= {1, 2, 3, 4}:
            raise ConfigError("conorm_insertions must be a subset of {1, 2, 3, 4}")
        if self.fusion_mode == "conorm" and not self.conorm_insertions:
            raise ConfigError("fusion_mode=conorm needs at least one insertion depth")
        if self.latent_dim < 1 or self.head_iterations < 1 or self.blocks_per_stage < 1:
            raise ConfigError("latent_dim, head_iterations and blocks_per_stage must be positive")
        if len(self.widths) != 4 or min(self.widths) < 1:
            raise ConfigError("widths must list four positive stage widths")

    @property
    def context_channels(self):
        return CONTEXT_CHANNELS[self.context]

    @property
    def stage_widths(self):
        return RESNET50_WIDTHS if self.backbone == "resnet50" else self.widths

    def to_dict(self):
        d = asdict(self)
        d["conorm_insertions"] = list(self.conorm_insertions)
        d["widths"] = list(self.widths)
        return d


def downsample_context(C, size):
    """Bilinear (area-aware) resize of context maps to a feature resolution."""
    if tuple(C.shape[-2:]) == tuple(size):
        return C
    return F.interpolate(C, size=size, mode="bilinear", align_corners=False, antialias=True)


class CoNormBlock(nn.Module):
    """Contextual normalization: ``X' = (1 + dsigma(lambda)) * X + beta(lambda)``, ``lambda = latent(C)``.

    The scale and bias maps are zero-initialized so a fresh block is the identity.
    """

    def __init__(self, context_channels, target_channels, latent_dim=128):
        super().__init__()
        if min(context_channels, target_channels, latent_dim) < 1:
            raise ConfigError("channel counts must be positive")
        self.context_channels = context_channels
        self.target_channels = target_channels
        self.latent_dim = latent_dim
        self.latent = nn.Sequential(
            nn.Conv2d(context_channels, latent_dim, 3, padding=1),
            nn.ReLU(inplace=True),
            nn.Conv2d(latent_dim, latent_dim, 3, padding=1),
            nn.ReLU(inplace=True),
        )
        self.scale = nn.Conv2d(latent_dim, target_channels, 1)
        self.bias = nn.Conv2d(latent_dim, target_channels, 1)
        for conv in (self.scale, self.bias):
            nn.init.zeros_(conv.weight)
            nn.init.zeros_(conv.bias)

    def modulation(self, C, size):
        lam = self.latent(downsample_context(C, size))
        return 1.0 + self.scale(lam), self.bias(lam)

    def forward(self, X, C):
        if X.shape[1] != self.target_channels:
            raise ConfigError(f"feature has {X.shape[1]} channels, block expects {self.target_channels}")
        if C.shape[1] != self.context_channels:
            raise ConfigError(f"context has {C.shape[1]} channels, block expects {self.context_channels}")
        sigma, beta = self.modulation(C, X.shape[-2:])
        return sigma * X + beta


def conorm_apply(block, X, C):
    """Functional form of :class:`CoNormBlock`; accepts unbatched (D, H, W) inputs too."""
    if X.dim() == 3:
        return block(X[None], C[None])[0]
    return block(X, C)


def fuse_early(image, *context_maps):
    """Channel-concatenate a (B, 3, H, W) image with context maps in the given order."""
    maps = [c if c.dim() == 4 else c.unsqueeze(1) for c in context_maps]
    for c in maps:
        if c.shape[0] != image.shape[0] or c.shape[-2:] != image.shape[-2:]:
            raise ConfigError(f"context {tuple(c.shape)} does not match image {tuple(image.shape)}")
    return torch.cat([image, *maps], 1)


def split_early(x, image_channels=3):
    return x[:, :image_channels], x[:, image_channels:]


def fuse_late(feature, C):
    """Concatenate context, resized to the feature resolution, after the feature channels."""
    if C.shape[0] != feature.shape[0]:
        raise ConfigError("batch size mismatch between feature and context")
    return torch.cat([feature, downsample_context(C, feature.shape[-2:])], 1)


class BasicBlock(nn.Module):
    def __init__(self, cin, cout, stride=1):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, 1, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(cout)
        self.shortcut = None
        if stride != 1 or cin != cout:
            self.shortcut = nn.Sequential(nn.Conv2d(cin, cout, 1, stride, bias=False), nn.BatchNorm2d(cout))

    def forward(self, x):
        y = F.relu(self.bn1(self.conv1(x)))
        y = self.bn2(self.conv2(y))
        return F.relu(y + (x if self.shortcut is None else self.shortcut(x)))


def _toy_backbone(cfg, in_channels, late_extra):
    w = cfg.widths
    stem = nn.Sequential(
        nn.Conv2d(in_channels, w[0], 7, 2, 3, bias=False),
        nn.BatchNorm2d(w[0]),
        nn.ReLU(inplace=True),
        nn.MaxPool2d(3, 2, 1),
    )
    stages = nn.ModuleList()
    cin = w[0]
    for k, (cout, stride) in enumerate(zip(w, (1, 2, 2, 2))):
        if k == 3:
            cin += late_extra
        blocks = [BasicBlock(cin, cout, stride)]
        blocks += [BasicBlock(cout, cout) for _ in range(cfg.blocks_per_stage - 1)]
        stages.append(nn.Sequential(*blocks))
        cin = cout
    return stem, stages


def _resnet50_backbone(cfg, in_channels, late_extra):
    from torchvision.models import resnet50

    net = resnet50(weights=None)
    if in_channels != 3:
        net.conv1 = nn.Conv2d(in_channels, 64, 7, 2, 3, bias=False)
    stem = nn.Sequential(net.conv1, net.bn1, net.relu, net.maxpool)
    layer4 = net.layer4
    if late_extra:
        # project the widened stage-3 output back to the width stage 4 expects
        layer4 = nn.Sequential(nn.Conv2d(RESNET50_WIDTHS[2] + late_extra, RESNET50_WIDTHS[2], 1), layer4)
    return stem, nn.ModuleList([net.layer1, net.layer2, net.layer3, layer4])


def mean_param_vector():
    """Neutral pose (identity rotations), zero shape and a typical camera, flattened."""
    pose = torch.zeros(NUM_JOINTS, 6)
    pose[:, 0] = 1.0
    pose[:, 4] = 1.0
    cam = torch.tensor([MEAN_LOG_SCALE, 0.0, 0.0])
    return torch.cat([pose.reshape(-1), torch.zeros(NUM_BETAS), cam])


def vector_to_params(theta):
    """Split a (B, 157) head output into BodyParams; the camera scale is stored as a log."""
    n_pose = NUM_JOINTS * 6
    pose = theta[:, :n_pose].reshape(-1, NUM_JOINTS, 6)
    shape = theta[:, n_pose:n_pose + NUM_BETAS]
    cam = theta[:, n_pose + NUM_BETAS:]
    camera = torch.cat([cam[:, :1].exp(), cam[:, 1:]], 1)
    return BodyParams(pose=pose, shape=shape, camera=camera)


class IterativeHead(nn.Module):
    def __init__(self, feat_dim, hidden=512, iterations=3):
        super().__init__()
        n = BodyParams.VECTOR_SIZE
        self.iterations = iterations
        self.fc1 = nn.Linear(feat_dim + n, hidden)
        self.fc2 = nn.Linear(hidden, hidden)
        self.dec = nn.Linear(hidden, n)
        nn.init.xavier_uniform_(self.dec.weight, gain=0.01)
        nn.init.zeros_(self.dec.bias)
        self.register_buffer("mean", mean_param_vector())

    def forward(self, feat):
        theta = self.mean.expand(feat.shape[0], -1)
        for _ in range(self.iterations):
            h = F.relu(self.fc1(torch.cat([feat, theta], 1)))
            h = F.relu(self.fc2(h))
            theta = theta + self.dec(h)
        return theta


class ConditionedRegressor(nn.Module):
    def __init__(self, cfg=None):
        super().__init__()
        cfg = cfg or ModelConfig()
        cfg.validate()
        self.cfg = cfg
        cc = cfg.context_channels
        in_channels = 3 + cc if cfg.fusion_mode == "early" else 3
        late_extra = cc if cfg.fusion_mode == "late" else 0
        build = _resnet50_backbone if cfg.backbone == "resnet50" else _toy_backbone
        self.stem, self.stages = build(cfg, in_channels, late_extra)
        self.conorm = nn.ModuleDict()
        if cfg.fusion_mode == "conorm":
            for d in cfg.conorm_insertions:
                self.conorm[str(d)] = CoNormBlock(cc, cfg.stage_widths[d - 1], cfg.latent_dim)
        self.head = IterativeHead(cfg.stage_widths[-1], cfg.head_hidden, cfg.head_iterations)

    def _check(self, image, context):
        size = self.cfg.input_size
        if image.dim() != 4 or image.shape[1] != 3 or tuple(image.shape[-2:]) != (size, size):
            raise ConfigError(f"expected image batch (B, 3, {size}, {size}), got {tuple(image.shape)}")
        if self.cfg.fusion_mode == "none":
            return
        if context is None:
            raise ConfigError(f"fusion_mode={self.cfg.fusion_mode} needs a context")
        if context.dim() != 4 or context.shape[0] != image.shape[0] or context.shape[1] != self.cfg.context_channels:
            raise ConfigError(
                f"expected context (B, {self.cfg.context_channels}, H, W), got {tuple(context.shape)}"
            )

    def features(self, image, context=None):
        self._check(image, context)
        mode = self.cfg.fusion_mode
        x = fuse_early(image, context) if mode == "early" else image
        x = self.stem(x)
        for d, stage in enumerate(self.stages, start=1):
            if d == 4 and mode == "late":
                x = fuse_late(x, context)
            x = stage(x)
            if str(d) in self.conorm:
                x = self.conorm[str(d)](x, context)
        return x.mean((2, 3))

    def forward(self, image, context=None):
        """Regress BodyParams for a batch of (image, instance context) pairs."""
        return vector_to_params(self.head(self.features(image, context)))


def regressor_forward(model, image, context=None):
    """Single-instance inference on an (H, W, 3) image in [0, 1] and a (C, H, W) context."""
    image = torch.as_tensor(image, dtype=torch.float32)
    if image.dim() != 3 or image.shape[-1] != 3:
        raise ConfigError(f"expected (H, W, 3) image, got {tuple(image.shape)}")
    x = image.permute(2, 0, 1)[None]
    c = None if context is None else torch.as_tensor(context, dtype=torch.float32)[None]
    if model.cfg.fusion_mode == "none":
        c = None
    with torch.no_grad():
        return model(x, c)[0]

"""
The quantitative surface: the random-context baseline, imputation log-likelihoods, probe classifiers on frozen
features, log-marginal estimates and a sample diversity score.
"""
import copy
import logging
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from scipy import ndimage
from scipy.stats import binomtest
from sklearn.metrics import f1_score

from ._json_report import JSONReport
from .data import Dataset, batch_indices, resolve_name
from .distributions import DiagGaussianParams, diag_gaussian_log_prob
from .errors import ContractViolation, UsageError
from .generative_model import convcnp_predict
from .inference_model import (ContextSet, abstract_posterior, check_context_size, infer_context, lookup_values,
                              union_mask)
from .neural_blocks import PPSVAE, ConvBlock
from .objective import iwae_log_marginal
from .vae_baseline import Vae, vae_encode, vae_iwae_log_marginal

logger = logging.getLogger(__name__)

FEATURE_KINDS = ['yM-sample', 'yM-mode', 'abstract-a', 'image', 'random-yM', 'vae-z']
CONTEXT_FEATURE_KINDS = ['yM-sample', 'yM-mode', 'abstract-a']
MIN_PROBE_SEEDS = 3


def require_context_model(model, purpose: str):
    """
    Raises a UsageError unless model is a PPSVAE, for operations that infer context sets.
    """
    if not isinstance(model, PPSVAE):
        raise UsageError(f'{purpose} needs a PPS-VAE checkpoint, got a {type(model).__name__} model')


def random_context(y: torch.Tensor, M: int, generator: torch.Generator) -> ContextSet:
    """
    Picks M distinct locations per image uniformly without replacement and looks up their values.
    :param y: Images, B x C x H x W
    :param M: Number of locations; 1 <= M < H*W
    :param generator: Seeded generator
    :return: ContextSet with exactly M points per image and no logits
    """
    height, width = y.shape[-2:]
    num_locations = height * width
    check_context_size(M, num_locations)
    picks = torch.stack([torch.randperm(num_locations, generator=generator, device=generator.device)[:M]
                         for _ in range(y.shape[0])]).to(y.device)
    onehots = F.one_hot(picks, num_classes=num_locations).to(y.dtype)
    mask = union_mask(onehots, height, width)
    return ContextSet(mask=mask, values=lookup_values(y, mask), onehots=onehots)


def masked_mean_log_likelihood(y: torch.Tensor, prediction: DiagGaussianParams, target_mask: torch.Tensor):
    """
    Gaussian log-density of y under prediction, averaged over the target pixels and channels of each image.
    """
    counts = target_mask.sum(dim=(1, 2, 3)) * y.shape[1]
    if bool((counts == 0).any()):
        raise ContractViolation('Imputation log-likelihood needs at least one target pixel per image')
    return diag_gaussian_log_prob(y, prediction, mask=target_mask, batch_dims=1) / counts


@torch.no_grad()
def imputation_log_likelihood(model: PPSVAE, ctx: ContextSet, y: torch.Tensor) -> torch.Tensor:
    """
    Per-target-pixel mean log-likelihood of y under the ConvCNP conditioned on ctx, one value per image.
    """
    return masked_mean_log_likelihood(y, convcnp_predict(model, ctx.mask, ctx.values), ctx.target_mask)


@torch.no_grad()
def target_squared_error(model: PPSVAE, ctx: ContextSet, y: torch.Tensor) -> torch.Tensor:
    """
    Mean squared error of the ConvCNP mean against y over the target pixels and channels, one value per image.
    """
    counts = ctx.target_mask.sum(dim=(1, 2, 3)) * y.shape[1]
    if bool((counts == 0).any()):
        raise ContractViolation('Reconstruction error needs at least one target pixel per image')
    prediction = convcnp_predict(model, ctx.mask, ctx.values)
    return ((prediction.mean - y) ** 2 * ctx.target_mask).sum(dim=(1, 2, 3)) / counts


@torch.no_grad()
def extract_features(model: PPSVAE, images: torch.Tensor, kind: str, M: int, temperature: float,
                     generator: torch.Generator, variant: str = 'autoregressive', vae: Vae = None,
                     batch_size: int = 256) -> torch.Tensor:
    """
    Frozen features for a probe classifier.

    yM-sample, yM-mode and random-yM give the (mask, values) overlay, N x (1 + C) x H x W, from hard posterior
    samples, the most probable locations, or uniformly random locations. abstract-a gives the mean of q(a|.)
    under the mode context, image the raw images and vae-z the VAE posterior mean.
    """
    kind = resolve_name(kind, FEATURE_KINDS, kind='feature kind')
    if kind == 'vae-z' and vae is None:
        raise UsageError('vae-z features need a trained VAE checkpoint')
    if kind == 'vae-z' and not isinstance(vae, Vae):
        raise UsageError(f'vae-z features need a VAE checkpoint, got a {type(vae).__name__} model')
    if kind in CONTEXT_FEATURE_KINDS:
        require_context_model(model, f'{kind} features')
    chunks = []
    for start in range(0, images.shape[0], batch_size):
        y = images[start:start + batch_size]
        if kind == 'image':
            chunks.append(y.clone())
        elif kind == 'vae-z':
            chunks.append(vae_encode(vae, y))
        else:
            if kind == 'random-yM':
                ctx = random_context(y, M, generator)
            else:
                ctx = infer_context(model, y, M, temperature, generator, variant=variant, hard=True,
                                    mode=kind in ('yM-mode', 'abstract-a'))
            if kind == 'abstract-a':
                chunks.append(abstract_posterior(model, ctx).mean)
            else:
                chunks.append(torch.cat([ctx.mask, ctx.values], dim=1))
    return torch.cat(chunks).detach()


class FeatureCache:
    """
    Memoises extracted features within one process, keyed by the options that determine them.
    """

    def __init__(self):
        self.features: dict = {}
        self.hits = 0

    @classmethod
    def options_string_encode(cls, kind: str, M: int, variant: str, seed: int, temperature: float, tag: str) -> str:
        """
        Encodes the feature options into one cache key
        :param kind: Feature kind
        :param M: Number of location draws
        :param variant: Posterior variant
        :param seed: Seed of the generator used for extraction
        :param temperature: Gumbel-Softmax temperature
        :param tag: Identifies the images, e.g. 'train:2000'
        :return: Key string
        """
        return '{}|{}|{}|{}|{}|{}'.format(kind, M, variant[0], seed, temperature, tag)

    def get_features(self, model: PPSVAE, images: torch.Tensor, kind: str, M: int, temperature: float, seed: int,
                     variant: str = 'autoregressive', vae: Vae = None, tag: str = '',
                     create_if_missing: bool = True):
        kind = resolve_name(kind, FEATURE_KINDS, kind='feature kind')
        key = self.options_string_encode(kind, M, variant, seed, temperature, tag)
        if key in self.features:
            self.hits += 1
            return self.features[key]
        if not create_if_missing:
            return None
        generator = torch.Generator(device=images.device)
        generator.manual_seed(seed)
        features = extract_features(model, images, kind, M, temperature, generator, variant, vae)
        self.features[key] = features
        return features


@dataclass
class ProbeConfig:
    epochs: int = 30
    batch_size: int = 64
    learning_rate: float = 1e-3
    weight_decay: float = 1e-4
    hidden: int = 64
    patience: int = 5
    val_fraction: float = 0.2
    crop_padding: int = 2
    augment: bool = True


@dataclass
class ProbeReport:
    feature_kind: str
    f1_macro_mean: float
    f1_macro_std: float
    seeds: list
    f1_per_seed: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


class ConvProbe(nn.Module):
    """
    Classifier for spatial features: a stem convolution, three residual blocks, global average pooling and a linear
    head.
    """

    def __init__(self, in_channels: int, num_classes: int, hidden: int):
        super().__init__()
        self.stem = nn.Conv2d(in_channels, hidden, 3, padding=1)
        self.blocks = nn.Sequential(*[ConvBlock(hidden) for _ in range(3)])
        self.head = nn.Linear(hidden, num_classes)

    def forward(self, x):
        return self.head(self.blocks(self.stem(x)).mean(dim=(2, 3)))


def mlp_probe(in_features: int, num_classes: int, hidden: int) -> nn.Module:
    return nn.Sequential(nn.Linear(in_features, hidden), nn.ReLU(), nn.Linear(hidden, hidden), nn.ReLU(),
                         nn.Linear(hidden, num_classes))


def augment_batch(x: torch.Tensor, generator: torch.Generator, padding: int) -> torch.Tensor:
    """
    Random crop after zero padding, then a random horizontal flip, drawn independently per image.
    """
    height, width = x.shape[-2:]
    padded = F.pad(x, (padding,) * 4)
    offsets = torch.randint(0, 2 * padding + 1, (x.shape[0], 2), generator=generator)
    flips = torch.rand(x.shape[0], generator=generator) < 0.5
    out = torch.stack([padded[i, :, top:top + height, left:left + width]
                       for i, (top, left) in enumerate(offsets.tolist())])
    return torch.where(flips[:, None, None, None].to(x.device), out.flip(-1), out)


def _predict(classifier: nn.Module, features: torch.Tensor, batch_size: int) -> np.ndarray:
    classifier.eval()
    with torch.no_grad():
        logits = torch.cat([classifier(features[i:i + batch_size]) for i in range(0, len(features), batch_size)])
    return logits.argmax(dim=-1).cpu().numpy()


def _macro_f1(labels: np.ndarray, predictions: np.ndarray, num_classes: int) -> float:
    return float(f1_score(labels, predictions, average='macro', labels=np.arange(num_classes), zero_division=0))


def _fit_probe(features, labels, val_features, val_labels, num_classes, seed, config: ProbeConfig) -> nn.Module:
    spatial = features.dim() == 4
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        if spatial:
            classifier = ConvProbe(features.shape[1], num_classes, config.hidden)
        else:
            classifier = mlp_probe(features.shape[1], num_classes, config.hidden)
    classifier = classifier.to(features.device)
    optimizer = torch.optim.AdamW(classifier.parameters(), lr=config.learning_rate,
                                  weight_decay=config.weight_decay, amsgrad=True)
    generator = torch.Generator()
    generator.manual_seed(seed)
    targets = torch.as_tensor(labels, dtype=torch.long, device=features.device)
    batch_size = min(config.batch_size, len(features))

    best_f1, best_state, stale = -1.0, None, 0
    for epoch in range(config.epochs):
        classifier.train()
        for indices in batch_indices(len(features), batch_size, seed * 1000 + epoch):
            x = features[indices]
            if spatial and config.augment:
                x = augment_batch(x, generator, config.crop_padding)
            optimizer.zero_grad(set_to_none=True)
            F.cross_entropy(classifier(x), targets[indices]).backward()
            optimizer.step()
        val_f1 = _macro_f1(val_labels, _predict(classifier, val_features, config.batch_size), num_classes)
        if val_f1 > best_f1:
            best_f1, best_state, stale = val_f1, copy.deepcopy(classifier.state_dict()), 0
        else:
            stale += 1
            if stale >= config.patience:
                logger.debug('Probe seed %d stopped early after epoch %d', seed, epoch)
                break
    classifier.load_state_dict(best_state)
    return classifier


def probe_train_eval(features: torch.Tensor, labels, seeds: list, test_features: torch.Tensor = None,
                     test_labels=None, feature_kind: str = 'image', config: ProbeConfig = None) -> ProbeReport:
    """
    Trains a classifier on frozen features once per seed and reports the macro F1 on held-out data.

    Spatial (N x Ch x H x W) features get a small convolutional classifier trained with crop and flip
    augmentation; vector (N x F) features get a 3-layer MLP. A validation split of the training features drives
    early stopping. Without test data, a seeded fifth of the training features is held out for testing.
    :param features: Training features
    :param labels: Integer labels, one per feature row
    :param seeds: At least three seeds
    :param test_features: Optional held-out features
    :param test_labels: Labels of the held-out features
    :param feature_kind: Name recorded in the report
    :param config: ProbeConfig, defaults if None
    :return: ProbeReport
    """
    config = config or ProbeConfig()
    features = features.detach().float()
    labels = np.asarray(labels, dtype=np.int64)
    if len(seeds) < MIN_PROBE_SEEDS:
        raise UsageError(f'Probe results need at least {MIN_PROBE_SEEDS} seeds, got {len(seeds)}')
    if len(labels) != len(features):
        raise UsageError(f'Got {len(labels)} labels for {len(features)} feature rows')
    num_classes = int(labels.max()) + 1 if len(labels) else 0
    if len(np.unique(labels)) < 2:
        raise UsageError('Probe classification needs labels from at least two classes')
    if test_features is not None:
        test_features = test_features.detach().float()
        test_labels = np.asarray(test_labels, dtype=np.int64)
        num_classes = max(num_classes, int(test_labels.max()) + 1)

    scores = []
    for seed in seeds:
        order = np.random.default_rng(seed).permutation(len(features))
        if test_features is None:
            cut = len(order) // 5
            held_out, order = order[:cut], order[cut:]
            eval_features, eval_labels = features[held_out], labels[held_out]
        else:
            eval_features, eval_labels = test_features, test_labels
        n_val = max(1, int(len(order) * config.val_fraction))
        val, train = order[:n_val], order[n_val:]
        classifier = _fit_probe(features[train], labels[train], features[val], labels[val], num_classes, seed,
                                config)
        scores.append(_macro_f1(eval_labels, _predict(classifier, eval_features, config.batch_size), num_classes))
        logger.info('Probe %s seed %d: macro F1 %.4f', feature_kind, seed, scores[-1])

    return ProbeReport(feature_kind=feature_kind, f1_macro_mean=float(np.mean(scores)),
                       f1_macro_std=float(np.std(scores)), seeds=list(seeds), f1_per_seed=scores)


def sample_diversity(images) -> float:
    """
    Mean pairwise Euclidean distance between flattened images.
    :param images: A sequence of equally shaped images or a stacked N x ... tensor, N >= 2
    """
    if not isinstance(images, torch.Tensor):
        images = torch.stack([torch.as_tensor(image) for image in images]) if len(images) else torch.empty(0)
    if images.shape[0] < 2:
        raise UsageError('Diversity needs at least two images')
    return float(torch.pdist(images.reshape(images.shape[0], -1).double()).mean())


def mean_edge_distance(points: np.ndarray, shape_mask: np.ndarray) -> float:
    """
    Mean distance from (row, col) points to the nearest boundary pixel of a binary shape mask. Boundary pixels are
    shape pixels with a 4-neighbour outside the shape.
    """
    shape_mask = np.asarray(shape_mask, dtype=bool)
    edge = shape_mask & ~ndimage.binary_erosion(shape_mask, border_value=0)
    if not edge.any() or len(points) == 0:
        raise UsageError('Edge distance needs a non-empty shape and at least one point')
    distance = ndimage.distance_transform_edt(~edge)
    points = np.asarray(points, dtype=int)
    return float(distance[points[:, 0], points[:, 1]].mean())


def estimate_log_marginal(model, ds: Dataset, K: int, seed: int, M: int = 8, temperature: float = 0.5,
                          variant: str = 'autoregressive', batch_size: int = 64, n_images: int = None) -> dict:
    """
    Mean IWAE log-marginal over the first n_images of a dataset, for a PPSVAE or a Vae.
    :return: {'K', 'mean_log_marginal', 'n_images', 'seed'}
    """
    if K < 1:
        raise UsageError(f'K must be at least 1, got {K}')
    n_images = len(ds) if n_images is None else min(n_images, len(ds))
    device = next(model.parameters()).device
    generator = torch.Generator(device=device)
    generator.manual_seed(seed)
    estimates = []
    for start in range(0, n_images, batch_size):
        y = ds.tensor(np.arange(start, min(start + batch_size, n_images)), device=device)
        if isinstance(model, Vae):
            estimates.append(vae_iwae_log_marginal(model, y, K, generator))
        else:
            estimates.append(iwae_log_marginal(model, y, M, K, temperature, generator, variant))
    estimates = torch.cat(estimates)
    return {'K': K, 'mean_log_marginal': float(estimates.mean()), 'n_images': n_images, 'seed': seed}


def _sign_test(wins: int, trials: int) -> float:
    if trials == 0:
        return 1.0
    return float(binomtest(wins, trials, 0.5, alternative='greater').pvalue)


def _paired_scores(model: PPSVAE, ds: Dataset, M: int, temperature: float, seed: int, variant: str, n_images: int,
                   batch_size: int, score) -> tuple:
    n_images = min(n_images, len(ds))
    device = next(model.parameters()).device
    generator = torch.Generator(device=device)
    generator.manual_seed(seed)
    learned, random = [], []
    for start in range(0, n_images, batch_size):
        y = ds.tensor(np.arange(start, min(start + batch_size, n_images)), device=device)
        ctx = infer_context(model, y, M, temperature, generator, variant=variant, hard=True)
        learned.append(score(model, ctx.detach(), y))
        random.append(score(model, random_context(y, M, generator), y))
    return torch.cat(learned).cpu().numpy(), torch.cat(random).cpu().numpy()


def _paired_summary(learned: np.ndarray, random: np.ndarray, wins: np.ndarray) -> dict:
    n_images = len(learned)
    return {
        'n_images': n_images,
        'learned_mean': float(learned.mean()),
        'random_mean': float(random.mean()),
        'win_rate': int(wins.sum()) / n_images,
        'sign_test_p': _sign_test(int(wins.sum()), int((learned != random).sum())),
        'learned': learned.tolist(),
        'random': random.tolist(),
    }


def compare_imputation(model: PPSVAE, ds: Dataset, M: int, temperature: float, seed: int,
                       variant: str = 'autoregressive', n_images: int = 200, batch_size: int = 64) -> dict:
    """
    Paired per-image imputation log-likelihoods under learned and random contexts of the same size M.
    """
    require_context_model(model, 'Imputation comparison')
    learned, random = _paired_scores(model, ds, M, temperature, seed, variant, n_images, batch_size,
                                     imputation_log_likelihood)
    return _paired_summary(learned, random, learned > random)


def compare_reconstruction(model: PPSVAE, ds: Dataset, M: int, temperature: float, seed: int,
                           variant: str = 'autoregressive', n_images: int = 200, batch_size: int = 64) -> dict:
    """
    Paired per-image squared error of the reconstructed target pixels under learned and random contexts of the
    same size M. A win is a lower error for the learned context.
    """
    require_context_model(model, 'Reconstruction comparison')
    learned, random = _paired_scores(model, ds, M, temperature, seed, variant, n_images, batch_size,
                                     target_squared_error)
    return _paired_summary(learned, random, learned < random)


def compare_random(model: PPSVAE, train_ds: Dataset, test_ds: Dataset, M: int, temperature: float, seeds: list,
                   variant: str = 'autoregressive', n_images: int = 200, probe_n: int = 2000,
                   cache: FeatureCache = None, probe_config: ProbeConfig = None) -> JSONReport:
    """
    Learned versus random contexts: paired imputation log-likelihoods and target squared errors on the test split,
    and probe macro F1 on y_M overlays from each context source.
    :return: A JSONReport with 'imputation', 'reconstruction' and 'probe' sections
    """
    require_context_model(model, 'compare-random')
    if not train_ds.has_labels or not test_ds.has_labels:
        raise UsageError(f'Dataset "{train_ds.name}" has no labels to probe')
    cache = cache or FeatureCache()
    report = JSONReport()
    report.set_contents_at_path('M', M)
    report.set_contents_at_path('variant', variant)
    report.set_contents_at_path('seeds', list(seeds))
    report.set_contents_at_path('imputation', compare_imputation(model, test_ds, M, temperature, seeds[0], variant,
                                                                 n_images))
    report.set_contents_at_path('reconstruction', compare_reconstruction(model, test_ds, M, temperature, seeds[0],
                                                                         variant, n_images))

    device = next(model.parameters()).device
    train_n, test_n = min(probe_n, len(train_ds)), min(probe_n, len(test_ds))
    train_images = train_ds.tensor(np.arange(train_n), device=device)
    test_images = test_ds.tensor(np.arange(test_n), device=device)
    for kind in ('yM-sample', 'random-yM'):
        train_features = cache.get_features(model, train_images, kind, M, temperature, seeds[0], variant,
                                            tag=f'train:{train_n}')
        test_features = cache.get_features(model, test_images, kind, M, temperature, seeds[0] + 1, variant,
                                           tag=f'test:{test_n}')
        probe = probe_train_eval(train_features, train_ds.labels[:train_n], seeds, test_features,
                                 test_ds.labels[:test_n], feature_kind=kind, config=probe_config)
        report.set_contents_at_path(f'probe/{kind}', probe.to_dict())

    learned = report.get_contents_at_path('probe/yM-sample/f1_per_seed')
    random = report.get_contents_at_path('probe/random-yM/f1_per_seed')
    report.set_contents_at_path('probe/learned_wins', int(sum(a > b for a, b in zip(learned, random))))
    logger.info('Learned vs random: imputation win rate %.3f, probe F1 %.4f vs %.4f',
                report.get_contents_at_path('imputation/win_rate'), float(np.mean(learned)), float(np.mean(random)))
    return report

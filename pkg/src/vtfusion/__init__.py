"""Few-shot anomaly detection by fusing prototype-distance and text-guided maps."""
from .backbone import BackboneSpec, MultiLevelFeatures
from .evalharness import EpisodeSplit, MetricReport, evaluate, load_dataset, sample_episode
from .fusion import FusionParams, fuse, image_score, segment
from .losses import LossConfig, afs_loss, nfc_loss, seg_loss, total_loss
from .metrics import auroc, pixel_auroc, pro
from .prototypes import PrototypeSet, init_prototypes, nearest_prototype, vision_prediction
from .synth import SynthConfig, SynthResult, synthesize
from .textflow import build_prompts, text_prediction
from .trainer import ModelCheckpoint, TrainConfig, predict, train

__version__ = "0.1.0"

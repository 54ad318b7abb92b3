"""Detector-based spuriosity rankings and last-layer retraining on frozen features."""

from .dataset import (DatasetManifest, ImageRecord, SyntheticConfig, SyntheticGroundTruth,
                      generate_synthetic, load_manifest, validate_manifest, write_manifest)
from .detection import (DetectionBox, MockDetector, ScoreRecord, ScoreTable, aggregate_boxes,
                        batch_score, score_image)
from .features import FeatureMatrix, MockBackbone, extract_features, mock_backbone_embed
from .linear_head import LinearHead, TrainConfig, evaluate_accuracy, predict, train_head
from .perturbation import (ForegroundMask, NoiseConfig, OODMapping, build_mask, eval_noise_sweep,
                           eval_ood, eval_stratified, inject_noise)
from .pipeline import PipelineConfig, load_config, run_pipeline
from .ranking import (SpuriosityRanking, SubsetSpec, build_rankings, rank_class, select_subset,
                      stratified_eval_sets)

__version__ = "0.1.0"

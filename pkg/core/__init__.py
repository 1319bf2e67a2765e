from .errors import (CheckpointError, ContractError, DataError, FasError, ImageDecodeError, InvalidArgumentError,
                     NumericError, StageError, exit_code_for)
from .config import (RunConfig, ModelConfig, TrainConfig, AugmentConfig, EvalConfig, DataConfig, TapPoint,
                     apply_overrides, derive_seed, load_config, parse_tap, save_config)
from .imagecore import ColorSpace, ImageTensor, make_rng, read_image, write_image
from .samples import AttackType, Label, Sample
from .augment import AugOp, AugOutcome, apply_fas_aug, apply_pda, rewrite_labels, simulator
from .vit import FasViT, build_model, count_parameters
from .checkpoint import file_digest, load_checkpoint, save_checkpoint
from .losses import apl, l2softmax, overall_loss
from .trainer import fit, grad_check, train_epoch
from .metrics import MetricsReport, aggregate_folds, compute_metrics, far_frr_curve
from .scoring import (ReferenceBank, ScoreReport, build_bank, calibrate, load_bank, read_scores, save_bank, score,
                      select_threshold, threshold_record, write_scores)
from .protocols import load_protocol
from .data import load_samples, load_split, read_manifest, sample_frames, synth_dataset, write_manifest
from .engine import PipelineEngine, attach_ground_truth, load_fold_samples, write_json
from .ablation import augmentation_benefit, run_ablation

"""Unsupervised domain adaptation for anatomical landmark detection."""

from .adaptation import (CurriculumState, DomainClassifier, PseudoLabelRecord,
                         curriculum_ratio, dynamic_thresholds,
                         fixed_threshold_masks, generate_pseudo_labels, grl,
                         loss_domain, read_pseudo_labels, total_loss,
                         write_pseudo_labels)
from .checkpoint import load_checkpoint, save_checkpoint
from .config import (AugmentConfig, CurriculumConfig, ExperimentConfig,
                     LossWeights, ModelConfig, OptimizerConfig, config_from_dict,
                     config_to_dict, load_config, save_config)
from .data import (ImageSample, augment, load_dataset, oversample_source,
                   resize_with_labels, to_original_coords)
from .errors import (CheckpointError, ConfigError, DataError, InputError,
                     UdalmError)
from .evaluation import (EvalReport, aggregate, histogram_report,
                         radial_errors, subdomain_report)
from .model import (LandmarkDetector, ModelOutput, Prediction, build_model,
                    decode_prediction, decode_predictions, project_to_grid)
from .objectives import (OffsetTarget, ScoreTarget, TargetBatch, encode_targets,
                         loss_base, loss_coord, loss_offset, loss_score)
from .synth import ShiftParams, SynthSpec, synth_generate
from .trainer import (AdaptationResult, predict_dataset, run_adaptation,
                      train_supervised)

__version__ = "0.1.0"

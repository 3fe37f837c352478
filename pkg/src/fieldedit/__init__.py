"""Local text-driven edits of latent-conditioned tri-plane radiance fields.

The package fits a small latent-modulated tri-plane generator to an analytic
scene, then trains per-edit networks — a latent residual mapper, a soft 3D
membership field, and a residual deformation — against a pluggable image/text
encoder, supervising the membership field with relevance maps distilled from
the encoder. Everything runs on numpy via a built-in reverse-mode engine.
"""

from .autodiff import (NonFiniteError, Tensor, backward, compute_gradients,
                       concat, finite_checks)
from .checkpoint import (CheckpointError, load_checkpoint, load_edit_checkpoint,
                         load_field_checkpoint, save_checkpoint,
                         save_edit_checkpoint, save_field_checkpoint)
from .config import (ConfigError, DEFAULTS, apply_overrides, default_config,
                     load_config, parse_config, save_config)
from .distillation import (aggregate_relevance, mask_loss, normalize_relevance,
                           pseudo_label, relevance_map)
from .editing import (AttentionFieldNet, DeformationNet, EditModules, EditStack,
                      ResidualMapper, base_feature_field, edited_feature_field,
                      field_fn_with_mask, fuse_features, map_latent)
from .field import (FeatureDecoder, FieldBundle, LatentCode, PlaneSynthesizer,
                    PretrainConfig, TriPlaneSet, decode_point, field_fn_from,
                    pretrain_field, render_view, sample_feature,
                    sample_features)
from .gradcheck import fd_gradient, check_gradients, run_case, run_suite
from .guidance import (AugmentConfig, SyntheticOracleEncoder,
                       ToyTransformerEncoder, augment_image, build_directions,
                       clip_contrastive_loss, clip_plus_loss, identity_embed,
                       identity_loss)
from .images import read_pgm, read_ppm, write_pgm, write_ppm
from .metrics import (MetricsReport, eval_edit, gt_region_mask, mask_iou,
                      masked_psnr)
from .nn import MLP, Linear, Module
from .optim import AdamState, adam_init, adam_step
from .rendering import (CameraPose, PoseRanges, RayBundle, Upsampler,
                        generate_rays, oracle_render_image, oracle_render_rays,
                        pose_from_angles, render_rays, sample_depths,
                        sample_pose)
from .scenes import (AnalyticSceneSpec, GaussianBlob, empty_scene, format_scene,
                     load_scene, parse_scene, recolor, two_blob_scene)
from .training import (PromptSet, TrainConfig, TrainingError, sparsity_loss,
                       train_edit, tv_loss)

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]

"""Text-driven editing of a toy style-based generator.

A hypernetwork, conditioned on a source image and the embedding-space
direction between two text prompts, emits multiplicative weight factors that
reassign the generator's convolution kernels; synthesis from the inverted
latent then yields the edited image. An adaptive probe decides which generator
layers receive factor heads.
"""

from .editor import (
    EditorConfig,
    EditPipeline,
    EditResult,
    Editor,
    FeatureBackbone,
    FusionModulator,
    HyperHead,
    WeightFactors,
    interpolate_factors,
    reassign,
)
from .embedding import (
    ContrastiveConfig,
    EmbedConfig,
    JointEmbedding,
    cosine_alignment_loss,
    directional_loss,
    global_loss,
    train_contrastive,
)
from .generator import (
    GeneratorBundle,
    GeneratorConfig,
    GeneratorWeights,
    PretrainConfig,
    pretrain_generator,
    synthesize,
)
from .selector import (
    LayerSelection,
    adaptive_threshold,
    probe_optimize,
    select_layers,
)
from .shapes import CaptionedSample, SceneSpec, caption, generate_dataset, render
from .training import (
    ShapeFeatureNet,
    TrainConfig,
    l2_loss,
    similarity_loss,
    total_loss,
    train_editor,
    train_shape_features,
)
from .evaluation import (
    AttributeOracle,
    EditReport,
    evaluate_edit,
    psnr,
    run_ablation,
    ssim,
    train_oracle,
)

__version__ = "0.1.0"

"""Desk-scale two-stage gloss-free sign-language translation.

Stage 1 trains a small visual encoder against a lightweight translation head
on video-grounded text generation; stage 2 freezes that encoder and
fine-tunes a pretrained seq2seq backend through a position-wise adapter.
Ships with a deterministic synthetic corpus, a joint-training baseline,
gradient-norm dominance diagnostics, beam-search decoding, and BLEU/ROUGE-L
evaluation.
"""

from .corpus import (
    Batch,
    Corpus,
    SignVideo,
    SyntheticSpec,
    TokenSequence,
    Vocabulary,
    collate,
    detokenize,
    generate_synthetic_corpus,
    load_corpus,
    save_corpus,
    tokenize,
    trim_vocabulary,
)
from .evalkit import EvalReport, TranslationHypothesis, beam_search, bleu, rouge_l
from .light_t import LIGHT_T_PRESETS, LightT, LightTConfig, build_light_t, label_smoothed_ce
from .llm_stage import (
    FreezePolicy,
    TinyBackendConfig,
    TinySeq2SeqBackend,
    apply_freeze,
    llm_adapter,
    pretrain_tiny_backend,
)
from .pipeline import TranslationPipeline
from .trainer import (
    EvalSettings,
    StageConfig,
    cosine_lr,
    run_joint_e2e,
    run_stage1,
    run_stage2,
)
from .visual_encoder import (
    FeatureSequence,
    VisualEncoder,
    VisualEncoderConfig,
    downsample_video,
    vl_adapter,
)

__version__ = "0.1.0"

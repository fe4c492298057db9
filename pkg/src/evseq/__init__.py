"""Self-supervised representations for financial event sequences.

Contrastive subsequence training, masked-event latent prediction, and their
weighted combination over an LSTM encoder, with global (whole-sequence
classification) and local (next-MCC) linear-probe evaluation.
"""

from .autodiff import Tensor
from .data import (Dataset, DataError, Event, EventSequence, SynthSpec,
                   Vocabulary, load_csv, make_batches, normalize_amounts,
                   rng_for, save_csv, split_dataset, synthesize_dataset,
                   transition_matrices)
from .encoder import (EncoderError, HiddenStates, MaskPlan, ModelParams,
                      apply_mask, embed_events, init_params, last_hidden,
                      lstm_forward, predict_masked, sequence_embedding)
from .objectives import (MaskedBatch, ObjectiveError, View, ViewBatch,
                         cmlm_loss, coles_loss, coles_pairs, cosine_distance,
                         cosine_similarity, hybrid_loss, sample_mask,
                         sample_negatives, sample_views)
from .training import (AdamState, Checkpoint, CheckpointError, ConfigError,
                       TrainConfig, TrainingError, compute_gradients,
                       compute_loss, config_hash, data_fingerprint,
                       finite_difference_check, gradcheck_suite,
                       load_checkpoint, save_checkpoint, train)
from .evaluation import (EmbeddingTable, EvaluationError, LinearModel,
                         ProbeHead, bayes_local_auc, evaluate,
                         extract_embeddings, fit_linear_classifier,
                         roc_auc_binary, roc_auc_weighted,
                         roc_auc_weighted_detail, summarize_runs,
                         train_local_probe)

__version__ = "0.1.0"

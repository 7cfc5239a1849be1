"""Federated-learning simulation for speech-embedding classification."""

from .errors import (ConfigurationError, DataError, FedspeechError, ProtocolError,
                     ShapeError, TrainingError, TruncatedPayloadError,
                     UnsupportedVersionError)
from .network import (AdamState, LayerSpec, ParameterSet, TrainConfig, adam_step,
                      backward, classifier_stack, cross_entropy, forward, he_init,
                      predict, train_epoch, train_model)
from .pooling import (EmbeddingSequence, FeatureVector, pool_corpus, pool_statistics,
                      stack_features)
from .federation import (AggregationScheme, ClientState, ClientUpdate, aggregate,
                         local_round, run_federated_training)
from .metrics import (TTestResult, confusion_metrics, histogram_scores, paired_t_test,
                      roc_auc, roc_curve, student_t_sf)
from .evaluation import (MetricsTable, run_experiment, run_experiments,
                         stratified_kfold)
from .data import (LabeledSequence, SiteSpec, default_site_presets, generate_synthetic,
                   import_features, pool_labeled, read_corpus, write_corpus)

__version__ = "0.1.0"

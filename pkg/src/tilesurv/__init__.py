"""Slide-conditional contrastive tile embeddings, cluster features, and
survival models for recurrence prediction on tiled pathology cohorts."""

from .cohort import (CohortConfig, PatientOutcome, SplitPlan, TileRecord,
                     generate_cohort, load_embeddings, save_embeddings,
                     split_by_patient)
from .contrastive import (AugmentConfig, EncoderState, TrainConfig, augment,
                          encode, info_nce_loss, loss_and_gradient,
                          momentum_update, slide_probe, train)
from .gmm import GmmModel, SlideFeature, fit_gmm, pool_slide, posterior
from .metrics import brier_score, c_index
from .pipeline import (ExperimentConfig, ExperimentReport, emit_report,
                       run_ablation, run_baselines, run_pipeline)
from .sampling import Batch, BatchSpec, epoch_schedule, sample_batch
from .survival import (CoxModel, KmCurve, SurvivalRecord, breslow_baseline,
                       cox_fit, cox_predict_risk, cox_predict_survival,
                       hazard_ratios, km_fit)
from .survnets import (DiscreteHazardModel, deepsurv_fit, mil_attention_pool,
                       mil_fit, nnsurv_fit, nnsurv_survival)

__version__ = "0.1.0"

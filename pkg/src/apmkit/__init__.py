"""
apmkit: predictive site modelling from multispectral rasters.

Band difference ratios, annuli median/MAD features, PCA with shrinkage LDA
or a (k, l)-nearest-neighbour rule under nested leave-one-out dimension
selection, ROC/AUC evaluation and convex combination with a conventional
score map.
"""

from .annuli import (
    FeatureMatrix, RadiiTable, annulus_offsets, default_radii, extract_features, load_features,
    load_radii, save_features, site_features,
)
from .bands import (
    BAND_CONFIGURATIONS, BandSet, KttCoefficients, band_difference_ratios, build_band_configuration,
    load_ktt, ndvi, select_bands, stack, tasseled_cap,
)
from .cv import CVSettings, NestedCVResult, nested_loocv, train_full
from .errors import (
    ApmkitError, BandError, EmptyAnnulusError, InfeasibleError, ModelError, RasterFormatError,
    SiteTableError,
)
from .evaluate import (
    RocCurve, ScorePairs, auc_score, convex_combine, plot_roc, roc_curve, select_gamma,
    tiebreak_refinement_check, tnr_at_fnr,
)
from .model import (
    KnnModel, LdaModel, PcaModel, TrainedApm, fit_lda, fit_pca, knn_kl_classify, posterior, project,
)
from .raster_io import (
    MultiBandImage, RasterHeader, SiteTable, crop, load_raster, load_sites, sample_background,
    save_raster, save_sites,
)
from .synth import SynthConfig, generate_labeled_dataset, generate_swath

__version__ = "0.1.0"

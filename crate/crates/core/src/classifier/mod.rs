//! One-vs-all MI-code classification.

pub mod eval;
pub mod external;
pub mod features;
pub mod model;
pub mod registry;
pub mod train;

pub use eval::{evaluate_features, EvalReport};
pub use external::{external_predict, CodeScores, ExternalModelRef};
pub use features::{featurize, tokenize, FeatureVector, FEATURE_DIM};
pub use model::{logistic, predict_code, train_code_classifier, CodeClassifier, Hyper};
pub use registry::{
    labels_from_scores, predict_labels, predict_labels_batch, LabelSet, ModelEntry, ModelMeta, ModelRegistry,
    RegistryEntry, ScoreRow,
};
pub use train::{
    label_corpus, labeled_examples, retrain, storable_codes, stratified_split, train_codes, LabeledExample, TrainedCode,
};

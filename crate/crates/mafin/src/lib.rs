//! Mafin: fine-tune a frozen, black-box text-embedding model by concatenating
//! it with a small trainable encoder.
//!
//! The black-box side is only ever consumed through its output vectors; the
//! trainable side is a feature-hashing linear encoder with exact analytic
//! gradients. Scores are cosine similarities, training minimizes
//! Plackett-Luce-family ranking losses (full KL, top-1 KL with label
//! smoothing, and the InfoNCE limit), and evaluation reports Recall@K and
//! NDCG@K over BEIR-style corpora.

pub mod augment;
pub mod eval;
pub mod genquery;
pub mod ingest;
pub mod trainer;
pub mod loss;
pub mod provider;
pub mod scoring;
pub mod rng;
pub mod vector;

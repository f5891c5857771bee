use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quantizer::PrefixVocab;
use crate::tensor::{Tensor, TensorKind};

/// Which side information the ranker uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Ablation {
    pub use_semid: bool,
    pub use_simbucket: bool,
    pub use_target_interaction: bool,
}

impl Ablation {
    pub const FULL: Ablation = Ablation {
        use_semid: true,
        use_simbucket: true,
        use_target_interaction: true,
    };
    /// ID-only target attention.
    pub const BASE: Ablation = Ablation {
        use_semid: false,
        use_simbucket: false,
        use_target_interaction: false,
    };
    pub const SEMID: Ablation = Ablation {
        use_semid: true,
        use_simbucket: false,
        use_target_interaction: false,
    };
    pub const SIMBUCKET: Ablation = Ablation {
        use_semid: false,
        use_simbucket: true,
        use_target_interaction: false,
    };
    pub const SIMBUCKET_SEMID: Ablation = Ablation {
        use_semid: true,
        use_simbucket: true,
        use_target_interaction: false,
    };

    pub fn label(&self) -> &'static str {
        match (self.use_semid, self.use_simbucket, self.use_target_interaction) {
            (false, false, false) => "base",
            (true, false, false) => "+semid",
            (false, true, false) => "+simbucket",
            (true, true, false) => "+simbucket+semid",
            (true, true, true) => "full",
            (false, false, true) => "base+ti",
            (true, false, true) => "+semid+ti",
            (false, true, true) => "+simbucket+ti",
        }
    }
}

impl Default for Ablation {
    fn default() -> Self {
        Self::FULL
    }
}

/// Layer widths of the ranker.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EsuConfig {
    /// Embedding width per item id-feature slot.
    pub id_widths: Vec<usize>,
    pub user_widths: Vec<usize>,
    pub context_widths: Vec<usize>,
    /// Width of one prefix embedding.
    pub prefix_width: usize,
    /// Number of prefix tokens per item.
    pub prefix_depth: usize,
    pub bucket_width: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub mlp_hidden: Vec<usize>,
}

impl Default for EsuConfig {
    fn default() -> Self {
        Self {
            id_widths: vec![16, 8],
            user_widths: vec![4, 4],
            context_widths: vec![4],
            prefix_width: 8,
            prefix_depth: 3,
            bucket_width: 8,
            heads: 2,
            head_dim: 16,
            mlp_hidden: vec![256, 64],
        }
    }
}

/// Everything that fixes tensor shapes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub esu: EsuConfig,
    pub ablation: Ablation,
    pub id_vocab: Vec<u32>,
    pub user_vocab: Vec<u32>,
    pub context_vocab: Vec<u32>,
    pub buckets: usize,
    pub codebook_size: usize,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        let e = &self.esu;
        let err = |m: String| Err(Error::Config(format!("esu: {m}")));
        if e.id_widths.len() != self.id_vocab.len() {
            return err(format!(
                "{} id widths for {} id feature slots",
                e.id_widths.len(),
                self.id_vocab.len()
            ));
        }
        if e.user_widths.len() != self.user_vocab.len() {
            return err(format!(
                "{} user widths for {} user feature slots",
                e.user_widths.len(),
                self.user_vocab.len()
            ));
        }
        if e.context_widths.len() != self.context_vocab.len() {
            return err(format!(
                "{} context widths for {} context feature slots",
                e.context_widths.len(),
                self.context_vocab.len()
            ));
        }
        if self.item_width() == 0 {
            return err("unified item width is zero".into());
        }
        if e.heads == 0 || e.head_dim == 0 {
            return err("heads and head_dim must be positive".into());
        }
        if self.ablation.use_semid && (e.prefix_depth == 0 || e.prefix_width == 0 || self.codebook_size == 0) {
            return err("semantic ids need positive prefix_depth, prefix_width and codebook size".into());
        }
        if self.ablation.use_simbucket && (e.bucket_width == 0 || self.buckets == 0) {
            return err("similarity buckets need positive bucket_width and bucket count".into());
        }
        if e.mlp_hidden.contains(&0) {
            return err("hidden layer widths must be positive".into());
        }
        Ok(())
    }

    pub fn id_width(&self) -> usize {
        self.esu.id_widths.iter().sum()
    }

    pub fn semantic_width(&self) -> usize {
        if self.ablation.use_semid {
            self.esu.prefix_depth * self.esu.prefix_width
        } else {
            0
        }
    }

    /// Width `D` of a unified item vector.
    pub fn item_width(&self) -> usize {
        self.id_width() + self.semantic_width()
    }

    pub fn sim_width(&self) -> usize {
        if self.ablation.use_simbucket {
            self.esu.bucket_width
        } else {
            0
        }
    }

    /// Width of attention inputs `h (+) e_sim`.
    pub fn attention_width(&self) -> usize {
        self.item_width() + self.sim_width()
    }

    pub fn user_width(&self) -> usize {
        self.esu.user_widths.iter().sum()
    }

    pub fn context_width(&self) -> usize {
        self.esu.context_widths.iter().sum()
    }

    /// `2D + user width + context width`.
    pub fn mlp_input_width(&self) -> usize {
        2 * self.item_width() + self.user_width() + self.context_width()
    }
}

/// Positions of each logical parameter in [`ModelParams::tensors`].
#[derive(Debug, Clone, PartialEq)]
pub struct Layout {
    pub id: Vec<usize>,
    pub prefix: Option<usize>,
    pub bucket: Option<usize>,
    pub target_sim: Option<usize>,
    pub user: Vec<usize>,
    pub context: Vec<usize>,
    pub wq: usize,
    pub wk: usize,
    /// (weight, bias) per MLP layer; the last layer has one output.
    pub mlp: Vec<(usize, usize)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub spec: ModelSpec,
    pub prefix_vocab: PrefixVocab,
    pub tensors: Vec<Tensor>,
    pub layout: Layout,
}

const EMBED_INIT: f64 = 0.01;

impl ModelParams {
    /// All-zero parameters.
    pub fn zeros(spec: ModelSpec, prefix_vocab: PrefixVocab) -> Result<Self> {
        spec.validate()?;
        let mut tensors = Vec::new();
        let mut push = |t: Tensor| {
            tensors.push(t);
            tensors.len() - 1
        };
        let e = spec.esu.clone();
        let id = spec
            .id_vocab
            .iter()
            .zip(&e.id_widths)
            .enumerate()
            .map(|(s, (&v, &w))| push(Tensor::zeros(format!("id.{s}"), v as usize + 1, w, TensorKind::Sparse)))
            .collect();
        let prefix = spec.ablation.use_semid.then(|| {
            push(Tensor::zeros(
                "prefix",
                prefix_vocab.num_rows(),
                e.prefix_width,
                TensorKind::Sparse,
            ))
        });
        let bucket = spec.ablation.use_simbucket.then(|| {
            push(Tensor::zeros(
                "bucket",
                spec.buckets,
                e.bucket_width,
                TensorKind::Sparse,
            ))
        });
        let target_sim = spec
            .ablation
            .use_simbucket
            .then(|| push(Tensor::zeros("target_sim", 1, e.bucket_width, TensorKind::Dense)));
        let user = spec
            .user_vocab
            .iter()
            .zip(&e.user_widths)
            .enumerate()
            .map(|(s, (&v, &w))| {
                push(Tensor::zeros(
                    format!("user.{s}"),
                    v as usize + 1,
                    w,
                    TensorKind::Sparse,
                ))
            })
            .collect();
        let context = spec
            .context_vocab
            .iter()
            .zip(&e.context_widths)
            .enumerate()
            .map(|(s, (&v, &w))| {
                push(Tensor::zeros(
                    format!("context.{s}"),
                    v as usize + 1,
                    w,
                    TensorKind::Sparse,
                ))
            })
            .collect();
        let aw = spec.attention_width();
        let wq = push(Tensor::zeros("attn.wq", e.heads * e.head_dim, aw, TensorKind::Dense));
        let wk = push(Tensor::zeros("attn.wk", e.heads * e.head_dim, aw, TensorKind::Dense));
        let mut mlp = Vec::new();
        let mut fan_in = spec.mlp_input_width();
        for (l, &out) in e.mlp_hidden.iter().chain(std::iter::once(&1)).enumerate() {
            let w = push(Tensor::zeros(format!("mlp.w{l}"), out, fan_in, TensorKind::Dense));
            let b = push(Tensor::zeros(format!("mlp.b{l}"), 1, out, TensorKind::Dense));
            mlp.push((w, b));
            fan_in = out;
        }
        let layout = Layout {
            id,
            prefix,
            bucket,
            target_sim,
            user,
            context,
            wq,
            wk,
            mlp,
        };
        Ok(Self {
            spec,
            prefix_vocab,
            tensors,
            layout,
        })
    }

    /// Embeddings uniform in `[-0.01, 0.01]`, projection and MLP weights
    /// uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`, biases zero.
    pub fn init(spec: ModelSpec, prefix_vocab: PrefixVocab, seed: u64) -> Result<Self> {
        let mut p = Self::zeros(spec, prefix_vocab)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let biases: Vec<usize> = p.layout.mlp.iter().map(|&(_, b)| b).collect();
        for (i, t) in p.tensors.iter_mut().enumerate() {
            if biases.contains(&i) {
                continue;
            }
            let bound = if t.kind == TensorKind::Sparse || t.name == "target_sim" {
                EMBED_INIT
            } else {
                1.0 / (t.cols as f64).sqrt()
            };
            for v in t.data.iter_mut() {
                *v = rng.random_range(-bound..=bound);
            }
        }
        Ok(p)
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.iter_mut().find(|t| t.name == name)
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }
}

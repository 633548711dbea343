use rand::Rng;

use crate::data::LabeledDataset;
use crate::error::{config, Result};
use crate::matrix::Matrix;
use crate::nn::{accuracy, cross_entropy_loss, Activation, CacheMode, DenseNet, Topology};
use crate::scalar::Scalar;

/// Layer widths of the three submodels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ArchSpec {
    pub n_inputs: usize,
    /// Hidden widths of the client submodel; the last entry is the cut width.
    pub client_widths: Vec<usize>,
    pub client_activation: Activation,
    /// Hidden widths of the auxiliary head before its output layer.
    pub aux_hidden: Vec<usize>,
    pub server_hidden: Vec<usize>,
    pub hidden_activation: Activation,
    pub n_classes: usize,
}

impl ArchSpec {
    /// One tanh client layer, a linear auxiliary head and one server layer.
    pub fn minimal(n_inputs: usize, cut_width: usize, n_classes: usize) -> Self {
        Self {
            n_inputs,
            client_widths: vec![cut_width],
            client_activation: Activation::Tanh,
            aux_hidden: Vec::new(),
            server_hidden: Vec::new(),
            hidden_activation: Activation::Tanh,
            n_classes,
        }
    }

    pub fn cut_width(&self) -> usize {
        self.client_widths.last().copied().unwrap_or(0)
    }

    fn head(&self, hidden: &[usize]) -> Result<Topology> {
        let mut widths = vec![self.cut_width()];
        widths.extend_from_slice(hidden);
        widths.push(self.n_classes);
        let mut acts = vec![self.hidden_activation; hidden.len()];
        acts.push(Activation::Identity);
        Topology::chain(&widths, &acts)
    }

    pub fn topologies(&self) -> Result<(Topology, Topology, Topology)> {
        if self.client_widths.is_empty() {
            return Err(config("client submodel needs at least one layer"));
        }
        if self.n_classes < 2 {
            return Err(config("need at least two classes"));
        }
        let mut widths = vec![self.n_inputs];
        widths.extend_from_slice(&self.client_widths);
        let client = Topology::chain(&widths, &vec![self.client_activation; self.client_widths.len()])?;
        Ok((client, self.head(&self.aux_hidden)?, self.head(&self.server_hidden)?))
    }
}

/// Client submodel, auxiliary head and server submodel.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelPartition<T> {
    pub client: DenseNet<T>,
    pub aux: DenseNet<T>,
    pub server: DenseNet<T>,
}

impl<T: Scalar> ModelPartition<T> {
    pub fn new(client: DenseNet<T>, aux: DenseNet<T>, server: DenseNet<T>) -> Result<Self> {
        let q = client.topology().output_width();
        if aux.topology().input_width() != q || server.topology().input_width() != q {
            return Err(config(format!(
                "auxiliary input {} and server input {} must equal the cut width {q}",
                aux.topology().input_width(),
                server.topology().input_width()
            )));
        }
        if aux.topology().output_width() != server.topology().output_width() {
            return Err(config("auxiliary head and server must predict the same classes"));
        }
        Ok(Self { client, aux, server })
    }

    pub fn random<R: Rng + ?Sized>(spec: &ArchSpec, rng: &mut R) -> Result<Self> {
        let (c, a, s) = spec.topologies()?;
        let client = DenseNet::random(c, rng);
        let aux = DenseNet::random(a, rng);
        let server = DenseNet::random(s, rng);
        Self::new(client, aux, server)
    }

    pub fn cut_width(&self) -> usize {
        self.client.topology().output_width()
    }

    /// `θ_c ++ θ_a`.
    pub fn local_params(&self) -> Vec<T> {
        let mut v = self.client.params().to_vec();
        v.extend_from_slice(self.aux.params());
        v
    }

    /// Loads `θ_c ++ θ_a`, or just `θ_c` when the vector has that length.
    pub fn set_local_params(&mut self, params: &[T]) -> Result<()> {
        let nc = self.client.param_count();
        if params.len() == nc {
            return self.client.set_params(params);
        }
        if params.len() != nc + self.aux.param_count() {
            return Err(config("local parameter vector has the wrong length"));
        }
        self.client.set_params(&params[..nc])?;
        self.aux.set_params(&params[nc..])
    }

    /// Composite client → server logits.
    pub fn predict(&self, inputs: &Matrix<T>) -> Result<Matrix<T>> {
        let (s, _) = self.client.forward(inputs, CacheMode::Disabled)?;
        Ok(self.server.forward(&s, CacheMode::Disabled)?.0)
    }

    /// Client → auxiliary head logits.
    pub fn predict_local(&self, inputs: &Matrix<T>) -> Result<Matrix<T>> {
        let (s, _) = self.client.forward(inputs, CacheMode::Disabled)?;
        Ok(self.aux.forward(&s, CacheMode::Disabled)?.0)
    }

    /// Mean cross-entropy and accuracy of the composite model.
    pub fn evaluate(&self, data: &LabeledDataset<T>) -> Result<(T, f64)> {
        let logits = self.predict(&data.inputs)?;
        Ok((
            cross_entropy_loss(&logits, &data.labels)?,
            accuracy(&logits, &data.labels),
        ))
    }
}

use rand::Rng;

use crate::layer::{LayerSpec, Shape};
use crate::network::{Cache, Network};
use crate::{ParamSet, Params, Scalar, Tensor, TensorError};

/// An optional convolutional trunk over an image, whose flattened features
/// are concatenated with a side vector and fed to a dense head.
///
/// With no trunk this is a plain MLP over the vector. All parameters share
/// one [`ParamSet`] under the `trunk.` and `head.` prefixes.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureNet {
    trunk: Option<Network>,
    head: Network,
    vector_dim: usize,
}

pub struct FeatureCache<T> {
    trunk: Option<Cache<T>>,
    head: Cache<T>,
    trunk_dim: usize,
}

impl<T> FeatureCache<T> {
    pub fn kink_signature(&self) -> u64 {
        let t = self.trunk.as_ref().map_or(0, |c| c.kink_signature());
        t.rotate_left(17) ^ self.head.kink_signature()
    }
}

pub struct FeatureGrads<T> {
    pub params: Params<T>,
    pub vector: Tensor<T>,
    pub image: Option<Tensor<T>>,
}

impl FeatureNet {
    /// `trunk_layers` should end in spatial layers; a `Flatten` is appended.
    pub fn new(
        image: Option<[usize; 3]>,
        trunk_layers: Vec<LayerSpec>,
        vector_dim: usize,
        head_layers: Vec<LayerSpec>,
    ) -> Result<Self, TensorError> {
        let trunk = match image {
            Some(dims) => {
                let mut layers = trunk_layers;
                layers.push(LayerSpec::Flatten);
                Some(Network::with_prefix("trunk.", &dims, layers)?)
            }
            None => None,
        };
        let feat = trunk.as_ref().map_or(0, |t| t.output_shape().size());
        if feat + vector_dim == 0 {
            return Err(TensorError::InvalidSpec("network has no inputs".into()));
        }
        let head = Network::with_prefix("head.", &[feat + vector_dim], head_layers)?;
        Ok(Self {
            trunk,
            head,
            vector_dim,
        })
    }

    /// Hidden dense layers with ReLU, then a linear output layer.
    pub fn mlp_layers(hidden: &[usize], out: usize) -> Vec<LayerSpec> {
        let mut layers = Vec::with_capacity(hidden.len() * 2 + 1);
        for &h in hidden {
            layers.push(LayerSpec::dense(h));
            layers.push(LayerSpec::Relu);
        }
        layers.push(LayerSpec::dense(out));
        layers
    }

    /// Strided 3×3 convolutions with ReLU, optionally followed by 2×2 pooling.
    pub fn conv_layers(filters: &[usize], pool: bool) -> Vec<LayerSpec> {
        let mut layers = Vec::new();
        for &f in filters {
            layers.push(LayerSpec::conv(f));
            layers.push(LayerSpec::Relu);
            if pool {
                layers.push(LayerSpec::MaxPool { size: 2 });
            }
        }
        layers
    }

    pub fn has_image(&self) -> bool {
        self.trunk.is_some()
    }

    pub fn image_shape(&self) -> Option<Shape> {
        self.trunk.as_ref().map(|t| t.input_shape())
    }

    pub fn vector_dim(&self) -> usize {
        self.vector_dim
    }

    pub fn output_dim(&self) -> usize {
        self.head.output_shape().size()
    }

    pub fn init_params<R: Rng + ?Sized>(&self, rng: &mut R) -> ParamSet {
        let mut p = ParamSet::new();
        if let Some(t) = &self.trunk {
            p.merge_prefixed("", t.init_params(rng)).expect("disjoint prefixes");
        }
        p.merge_prefixed("", self.head.init_params(rng)).expect("disjoint prefixes");
        p
    }

    pub fn check_params<T: Scalar>(&self, params: &Params<T>) -> Result<(), TensorError> {
        if let Some(t) = &self.trunk {
            t.check_params(params)?;
        }
        self.head.check_params(params)
    }

    fn head_input<T: Scalar>(
        &self,
        feats: Option<Tensor<T>>,
        vector: &Tensor<T>,
    ) -> Result<Tensor<T>, TensorError> {
        if vector.row_len() != self.vector_dim {
            return Err(TensorError::ShapeMismatch {
                layer: 0,
                kind: "vector input".into(),
                expected: vec![self.vector_dim],
                got: vector.shape().get(1..).unwrap_or(&[]).to_vec(),
            });
        }
        match feats {
            Some(f) if self.vector_dim > 0 => Tensor::concat_cols(&f, vector),
            Some(f) => Ok(f),
            None => Ok(vector.clone().reshape(vec![vector.batch(), self.vector_dim])?),
        }
    }

    fn trunk_input<'a, T: Scalar>(&self, image: Option<&'a Tensor<T>>) -> Result<Option<&'a Tensor<T>>, TensorError> {
        match (&self.trunk, image) {
            (Some(_), Some(img)) => Ok(Some(img)),
            (None, _) => Ok(None),
            (Some(t), None) => Err(TensorError::ShapeMismatch {
                layer: 0,
                kind: "image input".into(),
                expected: t.input_shape().dims(),
                got: vec![],
            }),
        }
    }

    pub fn forward<T: Scalar>(
        &self,
        params: &Params<T>,
        image: Option<&Tensor<T>>,
        vector: &Tensor<T>,
    ) -> Result<(Tensor<T>, FeatureCache<T>), TensorError> {
        let (feats, trunk_cache, trunk_dim) = match (self.trunk_input(image)?, &self.trunk) {
            (Some(img), Some(t)) => {
                let (f, c) = t.forward(params, img)?;
                let d = f.row_len();
                (Some(f), Some(c), d)
            }
            _ => (None, None, 0),
        };
        let x = self.head_input(feats, vector)?;
        let (y, head) = self.head.forward(params, &x)?;
        Ok((
            y,
            FeatureCache {
                trunk: trunk_cache,
                head,
                trunk_dim,
            },
        ))
    }

    pub fn infer<T: Scalar>(
        &self,
        params: &Params<T>,
        image: Option<&Tensor<T>>,
        vector: &Tensor<T>,
    ) -> Result<Tensor<T>, TensorError> {
        let feats = match (self.trunk_input(image)?, &self.trunk) {
            (Some(img), Some(t)) => Some(t.infer(params, img)?),
            _ => None,
        };
        let x = self.head_input(feats, vector)?;
        self.head.infer(params, &x)
    }

    /// Gradients for all parameters (in `params` order), the side vector, and
    /// the image when `want_image` is set.
    pub fn backward<T: Scalar>(
        &self,
        params: &Params<T>,
        cache: &FeatureCache<T>,
        grad_out: &Tensor<T>,
        want_image: bool,
    ) -> Result<FeatureGrads<T>, TensorError> {
        let (head_grads, dx) = self.head.backward(params, &cache.head, grad_out)?;
        let (dfeat, dvec) = dx.split_cols(cache.trunk_dim);
        let mut all = Params::new();
        let mut dimage = None;
        if let (Some(t), Some(tc)) = (&self.trunk, &cache.trunk) {
            let (tg, di) = t.backward(params, tc, &dfeat)?;
            all.merge_prefixed("", tg)?;
            if want_image {
                dimage = Some(di);
            }
        }
        all.merge_prefixed("", head_grads)?;
        Ok(FeatureGrads {
            params: all,
            vector: dvec,
            image: dimage,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn grads_follow_param_order() {
        let net = FeatureNet::new(
            Some([8, 8, 3]),
            FeatureNet::conv_layers(&[4, 8], false),
            2,
            FeatureNet::mlp_layers(&[5], 1),
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = net.init_params(&mut rng);
        let img = Tensor::<f32>::filled(vec![3, 8, 8, 3], 0.5);
        let v = Tensor::<f32>::filled(vec![3, 2], -0.2);
        let (y, cache) = net.forward(&p, Some(&img), &v).unwrap();
        assert_eq!(y.shape(), &[3, 1]);
        let g = net.backward(&p, &cache, &Tensor::filled(vec![3, 1], 1.0), true).unwrap();
        p.check_same_layout(&g.params).unwrap();
        assert_eq!(g.vector.shape(), &[3, 2]);
        assert_eq!(g.image.unwrap().shape(), &[3, 8, 8, 3]);
    }

    #[test]
    fn missing_image_rejected() {
        let net = FeatureNet::new(Some([4, 4, 1]), vec![], 0, FeatureNet::mlp_layers(&[], 1)).unwrap();
        let p = net.init_params(&mut ChaCha8Rng::seed_from_u64(0));
        assert!(net.infer::<f32>(&p, None, &Tensor::zeros(vec![1, 0])).is_err());
    }
}

/// Per-sample activation shape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    Flat(usize),
    /// Height, width, channels (NHWC without the batch axis).
    Image(usize, usize, usize),
}

impl Shape {
    pub fn dims(&self) -> Vec<usize> {
        match *self {
            Shape::Flat(n) => vec![n],
            Shape::Image(h, w, c) => vec![h, w, c],
        }
    }

    pub fn size(&self) -> usize {
        self.dims().iter().product()
    }

    pub fn from_dims(dims: &[usize]) -> Option<Shape> {
        match *dims {
            [n] => Some(Shape::Flat(n)),
            [h, w, c] => Some(Shape::Image(h, w, c)),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerSpec {
    Dense {
        units: usize,
    },
    Conv2d {
        filters: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    ConvTranspose2d {
        filters: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        output_padding: usize,
    },
    Relu,
    Tanh,
    Sigmoid,
    Flatten,
    Reshape {
        height: usize,
        width: usize,
        channels: usize,
    },
    MaxPool {
        size: usize,
    },
}

impl LayerSpec {
    /// 3×3 convolution, stride 2, padding 1.
    pub fn conv(filters: usize) -> Self {
        LayerSpec::Conv2d {
            filters,
            kernel: 3,
            stride: 2,
            padding: 1,
        }
    }

    /// Transposed 3×3 convolution that exactly doubles the spatial size.
    pub fn deconv(filters: usize) -> Self {
        LayerSpec::ConvTranspose2d {
            filters,
            kernel: 3,
            stride: 2,
            padding: 1,
            output_padding: 1,
        }
    }

    pub fn dense(units: usize) -> Self {
        LayerSpec::Dense { units }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            LayerSpec::Dense { .. } => "Dense",
            LayerSpec::Conv2d { .. } => "Conv2D",
            LayerSpec::ConvTranspose2d { .. } => "ConvTranspose2D",
            LayerSpec::Relu => "ReLU",
            LayerSpec::Tanh => "Tanh",
            LayerSpec::Sigmoid => "Sigmoid",
            LayerSpec::Flatten => "Flatten",
            LayerSpec::Reshape { .. } => "Reshape",
            LayerSpec::MaxPool { .. } => "MaxPool",
        }
    }

    /// Output shape for a given input shape, or `None` if the layer cannot
    /// accept it.
    pub fn output_shape(&self, input: Shape) -> Option<Shape> {
        match (*self, input) {
            (LayerSpec::Dense { units }, Shape::Flat(_)) => Some(Shape::Flat(units)),
            (
                LayerSpec::Conv2d {
                    filters,
                    kernel,
                    stride,
                    padding,
                },
                Shape::Image(h, w, _),
            ) => {
                if stride == 0 || h + 2 * padding < kernel || w + 2 * padding < kernel {
                    return None;
                }
                Some(Shape::Image(
                    (h + 2 * padding - kernel) / stride + 1,
                    (w + 2 * padding - kernel) / stride + 1,
                    filters,
                ))
            }
            (
                LayerSpec::ConvTranspose2d {
                    filters,
                    kernel,
                    stride,
                    padding,
                    output_padding,
                },
                Shape::Image(h, w, _),
            ) => {
                let oh = ((h - 1) * stride + kernel + output_padding).checked_sub(2 * padding)?;
                let ow = ((w - 1) * stride + kernel + output_padding).checked_sub(2 * padding)?;
                if stride == 0 || oh == 0 || ow == 0 {
                    return None;
                }
                Some(Shape::Image(oh, ow, filters))
            }
            (LayerSpec::Relu | LayerSpec::Tanh | LayerSpec::Sigmoid, s) => Some(s),
            (LayerSpec::Flatten, s) => Some(Shape::Flat(s.size())),
            (
                LayerSpec::Reshape {
                    height,
                    width,
                    channels,
                },
                Shape::Flat(n),
            ) if n == height * width * channels => Some(Shape::Image(height, width, channels)),
            (LayerSpec::MaxPool { size }, Shape::Image(h, w, c)) if size > 0 && h >= size && w >= size => {
                Some(Shape::Image(h / size, w / size, c))
            }
            _ => None,
        }
    }

    /// Shapes of `(weight, bias)` for layers that carry parameters.
    pub fn param_shapes(&self, input: Shape) -> Option<(Vec<usize>, Vec<usize>)> {
        match (*self, input) {
            (LayerSpec::Dense { units }, Shape::Flat(n)) => Some((vec![n, units], vec![units])),
            (
                LayerSpec::Conv2d {
                    filters, kernel, ..
                },
                Shape::Image(_, _, c),
            ) => Some((vec![kernel, kernel, c, filters], vec![filters])),
            (
                LayerSpec::ConvTranspose2d {
                    filters, kernel, ..
                },
                Shape::Image(_, _, c),
            ) => Some((vec![c, kernel, kernel, filters], vec![filters])),
            _ => None,
        }
    }

    /// Fan-in used by the uniform initializer.
    pub(crate) fn fan_in(&self, input: Shape) -> usize {
        match (*self, input) {
            (LayerSpec::Dense { .. }, Shape::Flat(n)) => n,
            (LayerSpec::Conv2d { kernel, .. }, Shape::Image(_, _, c)) => kernel * kernel * c,
            (LayerSpec::ConvTranspose2d { kernel, stride, .. }, Shape::Image(_, _, c)) => {
                // each output pixel sees about (kernel/stride)^2 input taps
                (c * kernel * kernel / (stride * stride)).max(1)
            }
            _ => 1,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_pyramid_halves_32_to_4() {
        let mut s = Shape::Image(32, 32, 3);
        let mut sizes = vec![];
        for f in [16, 32, 64] {
            s = LayerSpec::conv(f).output_shape(s).unwrap();
            if let Shape::Image(h, _, _) = s {
                sizes.push(h);
            }
        }
        assert_eq!(sizes, vec![16, 8, 4]);
        assert_eq!(s, Shape::Image(4, 4, 64));
    }

    #[test]
    fn deconv_doubles() {
        let s = LayerSpec::deconv(8).output_shape(Shape::Image(4, 4, 32)).unwrap();
        assert_eq!(s, Shape::Image(8, 8, 8));
    }

    #[test]
    fn dense_rejects_images() {
        assert!(LayerSpec::dense(4).output_shape(Shape::Image(2, 2, 1)).is_none());
    }
}

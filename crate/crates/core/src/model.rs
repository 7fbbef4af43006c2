//! The trainable separation system: the U-Net generator plus its mixture
//! conditioner, an encoder with the codec's architecture and its own weights.

use crate::autograd::{Graph, Var};
use crate::checkpoint::{push_store, Checkpoint, Cursor, Kind};
use crate::codec::CodecModel;
use crate::error::{ensure, Result};
use crate::params::{Bind, ParamStore};
use crate::tensor::{LatentTensor, Tensor};
use crate::unet::{GeneratorModel, UNetConfig};
use crate::audio::Waveform;

#[derive(Clone, Debug, PartialEq)]
pub struct SeparationModel {
    pub generator: GeneratorModel,
    /// Conditioner weights, laid out like `codec.encoder_params`.
    pub conditioner: ParamStore,
}

impl SeparationModel {
    /// Fresh generator; the conditioner starts as a copy of the codec encoder.
    pub fn new(codec: &CodecModel, config: UNetConfig, seed: u64) -> Result<Self> {
        ensure!(
            config.latent_channels == codec.config.feature_channels,
            "generator expects {} latent channels, codec produces {}",
            config.latent_channels,
            codec.config.feature_channels
        );
        Ok(Self {
            generator: GeneratorModel::new(config, seed)?,
            conditioner: codec.encoder_params.clone(),
        })
    }

    pub fn count_parameters(&self) -> usize {
        self.generator.count_parameters() + self.conditioner.num_scalars()
    }

    /// Normalized conditioning latent of a (frame-aligned) mixture, as a node
    /// whose parameters are bound through `p`.
    pub fn condition_graph(&self, codec: &CodecModel, p: &Bind<'_>, g: &mut Graph, mixture: &Tensor) -> Var {
        let x = g.constant(mixture.clone());
        let z = codec.encoder.forward(p, g, x);
        g.scale(z, 1.0 / codec.latent_scale)
    }

    /// Normalized conditioning latent `C` of a mixture waveform.
    pub fn condition(&self, codec: &CodecModel, mixture: &Waveform) -> Result<LatentTensor> {
        ensure!(
            mixture.num_channels() == codec.config.audio_channels,
            "mixture has {} channels, codec expects {}",
            mixture.num_channels(),
            codec.config.audio_channels
        );
        let padded = mixture.resized(codec.config.padded_len(mixture.len()));
        let mut g = Graph::new();
        let c = self.condition_graph(codec, &self.conditioner.bind(0, false), &mut g, &padded.to_tensor());
        Ok(g.value(c).clone())
    }

    /// Generator checkpoint followed by the conditioner tensors; the last
    /// integer is the conditioner tensor count.
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = self.generator.to_checkpoint();
        push_store(&mut ck, &self.conditioner);
        ck.ints.push(self.conditioner.len() as u64);
        ck
    }

    /// `codec` supplies the conditioner layout.
    pub fn from_checkpoint(ck: &Checkpoint, codec: &CodecModel) -> Result<Self> {
        ck.expect_kind(Kind::Generator)?;
        let n_cond = *ck.ints.last().ok_or_else(|| crate::Error::invalid("empty generator header"))? as usize;
        ensure!(n_cond <= ck.tensors.len(), "conditioner tensor count exceeds payload");
        let split = ck.tensors.len() - n_cond;
        let gen_ck = Checkpoint {
            kind: Kind::Generator,
            ints: ck.ints[..ck.ints.len() - 1].to_vec(),
            floats: ck.floats.clone(),
            tensors: ck.tensors[..split].to_vec(),
        };
        let generator = GeneratorModel::from_checkpoint(&gen_ck)?;
        let cond_ck = Checkpoint {
            kind: Kind::Generator,
            ints: Vec::new(),
            floats: Vec::new(),
            tensors: ck.tensors[split..].to_vec(),
        };
        let mut conditioner = codec.encoder_params.clone();
        let mut cur = Cursor::new(&cond_ck);
        cur.fill(&mut conditioner)?;
        cur.finish()?;
        Ok(Self { generator, conditioner })
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: impl AsRef<std::path::Path>, codec: &CodecModel) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?, codec)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::CodecConfig;

    #[test]
    fn checkpoint_round_trip_and_condition_shape() {
        let codec = CodecModel::init(CodecConfig::default(), 3).unwrap();
        let m = SeparationModel::new(&codec, UNetConfig::toy(8), 4).unwrap();
        assert_eq!(m.conditioner, codec.encoder_params);
        let back = SeparationModel::from_checkpoint(&Checkpoint::from_bytes(&m.to_checkpoint().to_bytes()).unwrap(), &codec).unwrap();
        assert_eq!(back, m);
        let c = m.condition(&codec, &Waveform::mono(8000, vec![0.1; 1000])).unwrap();
        assert_eq!(c.shape(), (8, 16));
        assert!(SeparationModel::new(&codec, UNetConfig::toy(4), 0).is_err());
    }
}

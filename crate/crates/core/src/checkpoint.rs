//! Binary checkpoints.
//!
//! Layout (little-endian): magic `STFLOWCK`, u32 version, u32-length-prefixed
//! key=value text (run config plus `state.*` keys), u32 parameter count and
//! per parameter a u32-length-prefixed name and a tensor, then the optimizer
//! (u64 update count, u32 count, first moments, second moments), the EMA
//! shadow (u32 count, tensors), u64 step and u64 seed.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use stflow_tensor::io::{write_tensor, CountingReader};
use stflow_tensor::{DType, Tensor};

use crate::config::RunConfig;
use crate::error::{lift_format, Error, Result};
use crate::model::StFlow;
use crate::optim::Adam;
use crate::params::ParamStore;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"STFLOWCK";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Training state that is not part of the run configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub actnorm_initialized: bool,
    /// Normalization range fitted on the training split.
    pub min_z: f64,
    pub max_z: f64,
}

impl TrainState {
    fn to_text(&self) -> String {
        format!(
            "state.actnorm_initialized={}\nstate.min_z={}\nstate.max_z={}\n",
            self.actnorm_initialized, self.min_z, self.max_z
        )
    }
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub state: TrainState,
    pub params: ParamStore,
    pub optim: Adam,
    pub step: u64,
    pub seed: u64,
}

fn write_u32<W: Write>(w: &mut W, v: usize, what: &str) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Input(format!("{what} {v} exceeds u32")))?;
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn write_tensors<W: Write>(w: &mut W, ts: &[Tensor]) -> Result<()> {
    write_u32(w, ts.len(), "tensor count")?;
    for t in ts {
        write_tensor(w, t, DType::F64)?;
    }
    Ok(())
}

fn read_tensors<R: Read>(
    r: &mut CountingReader<R>,
    like: &[Tensor],
    what: &str,
) -> Result<Vec<Tensor>> {
    let at = r.offset();
    let n = r.read_u32().map_err(lift_format)? as usize;
    if n != like.len() {
        return Err(Error::Format {
            offset: at,
            msg: format!("{what}: {n} tensors, model has {}", like.len()),
        });
    }
    like.iter()
        .map(|expected| {
            let at = r.offset();
            let (t, _) = r.read_tensor().map_err(lift_format)?;
            if t.shape() != expected.shape() {
                return Err(Error::Format {
                    offset: at,
                    msg: format!(
                        "{what}: shape {:?}, expected {:?}",
                        t.shape(),
                        expected.shape()
                    ),
                });
            }
            Ok(t)
        })
        .collect()
}

impl Checkpoint {
    pub fn write<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        let text = format!("{}{}", self.config.to_text(), self.state.to_text());
        write_u32(w, text.len(), "config block")?;
        w.write_all(text.as_bytes())?;
        write_u32(w, self.params.len(), "parameter count")?;
        for id in self.params.ids() {
            let name = self.params.name(id);
            write_u32(w, name.len(), "name length")?;
            w.write_all(name.as_bytes())?;
            write_tensor(w, self.params.get(id), DType::F64)?;
        }
        w.write_all(&self.optim.step.to_le_bytes())?;
        write_tensors(w, &self.optim.m)?;
        write_tensors(w, &self.optim.v)?;
        write_tensors(w, &self.optim.ema)?;
        w.write_all(&self.step.to_le_bytes())?;
        w.write_all(&self.seed.to_le_bytes())?;
        Ok(())
    }

    /// Writes to a sibling temporary file and renames it into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        {
            let mut w = BufWriter::new(File::create(&tmp)?);
            self.write(&mut w)?;
            w.flush()?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        self.write(&mut out)?;
        Ok(out)
    }

    /// Reads a checkpoint and rebuilds the model it describes.
    pub fn read<R: Read>(r: R) -> Result<(StFlow, Self)> {
        let mut r = CountingReader::new(r);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(lift_format)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Format {
                offset: 0,
                msg: "bad magic, expected STFLOWCK".into(),
            });
        }
        let version = r.read_u32().map_err(lift_format)?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format {
                offset: 8,
                msg: format!("unsupported checkpoint version {version}"),
            });
        }
        let len = r.read_u32().map_err(lift_format)? as usize;
        if len > 1 << 20 {
            return Err(r
                .format_error(format!("config block of {len} bytes"))
                .into());
        }
        let mut text = vec![0u8; len];
        r.read_exact(&mut text).map_err(lift_format)?;
        let text = String::from_utf8(text)
            .map_err(|_| Error::from(r.format_error("config block is not UTF-8")))?;
        let (config, state) = parse_block(&text)?;

        let (model, mut params) = StFlow::build(&config.model, config.seed)?;
        let at = r.offset();
        let count = r.read_u32().map_err(lift_format)? as usize;
        if count != params.len() {
            return Err(Error::Format {
                offset: at,
                msg: format!("{count} parameters, model has {}", params.len()),
            });
        }
        for id in params.ids().collect::<Vec<_>>() {
            let at = r.offset();
            let n = r.read_u32().map_err(lift_format)? as usize;
            if n > 4096 {
                return Err(Error::Format {
                    offset: at,
                    msg: format!("parameter name of {n} bytes"),
                });
            }
            let mut name = vec![0u8; n];
            r.read_exact(&mut name).map_err(lift_format)?;
            if name != params.name(id).as_bytes() {
                return Err(Error::Format {
                    offset: at,
                    msg: format!(
                        "parameter {:?}, expected {:?}",
                        String::from_utf8_lossy(&name),
                        params.name(id)
                    ),
                });
            }
            let at = r.offset();
            let (t, _) = r.read_tensor().map_err(lift_format)?;
            if t.shape() != params.get(id).shape() {
                return Err(Error::Format {
                    offset: at,
                    msg: format!(
                        "{}: shape {:?}, expected {:?}",
                        params.name(id),
                        t.shape(),
                        params.get(id).shape()
                    ),
                });
            }
            params.set(id, t);
        }
        let mut optim = Adam::new(config.optim.clone(), &params);
        optim.step = r.read_u64().map_err(lift_format)?;
        optim.m = read_tensors(&mut r, params.values(), "first moments")?;
        optim.v = read_tensors(&mut r, params.values(), "second moments")?;
        optim.ema = read_tensors(&mut r, params.values(), "ema shadow")?;
        let step = r.read_u64().map_err(lift_format)?;
        let seed = r.read_u64().map_err(lift_format)?;
        let mut probe = [0u8; 1];
        if r.read_exact(&mut probe).is_ok() {
            return Err(lift_format(
                r.format_error("trailing bytes after checkpoint"),
            ));
        }
        Ok((
            model,
            Self {
                config,
                state,
                params,
                optim,
                step,
                seed,
            },
        ))
    }

    pub fn load(path: &Path) -> Result<(StFlow, Self)> {
        Self::read(BufReader::new(File::open(path)?))
    }
}

fn parse_block(text: &str) -> Result<(RunConfig, TrainState)> {
    let mut state = TrainState {
        actnorm_initialized: false,
        min_z: 0.0,
        max_z: 1.0,
    };
    let mut rest = String::new();
    for line in text.lines() {
        match line.split_once('=') {
            Some((k, v)) if k.starts_with("state.") => {
                let bad = || Error::Config(format!("invalid checkpoint state line {line:?}"));
                match k {
                    "state.actnorm_initialized" => {
                        state.actnorm_initialized = v.parse().map_err(|_| bad())?
                    }
                    "state.min_z" => state.min_z = v.parse().map_err(|_| bad())?,
                    "state.max_z" => state.max_z = v.parse().map_err(|_| bad())?,
                    _ => return Err(bad()),
                }
            }
            _ => {
                rest.push_str(line);
                rest.push('\n');
            }
        }
    }
    Ok((RunConfig::parse(&rest)?, state))
}

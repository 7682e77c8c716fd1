//! JSON Lines scenario files: a header line, then one scenario per line.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ForgeError, Result, Scenario};

pub const SCENARIO_FORMAT: &str = "ht-scenarios";
pub const SCENARIO_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
}

pub struct ScenarioWriter<W: Write> {
    out: W,
}

impl<W: Write> ScenarioWriter<W> {
    pub fn new(mut out: W) -> Result<Self> {
        let h = Header {
            format: SCENARIO_FORMAT.into(),
            version: SCENARIO_VERSION,
        };
        serde_json::to_writer(&mut out, &h).map_err(std::io::Error::from)?;
        out.write_all(b"\n")?;
        Ok(ScenarioWriter { out })
    }

    pub fn write(&mut self, sc: &Scenario) -> Result<()> {
        serde_json::to_writer(&mut self.out, sc).map_err(std::io::Error::from)?;
        self.out.write_all(b"\n")?;
        Ok(())
    }

    pub fn finish(mut self) -> Result<W> {
        self.out.flush()?;
        Ok(self.out)
    }
}

/// Streams scenarios one line at a time.
pub struct ScenarioReader<R: BufRead> {
    input: R,
    line: usize,
    buf: String,
}

impl<R: BufRead> ScenarioReader<R> {
    pub fn new(mut input: R) -> Result<Self> {
        let mut buf = String::new();
        if input.read_line(&mut buf)? == 0 {
            return Err(ForgeError::Format {
                line: 1,
                msg: "empty file, expected a header".into(),
            });
        }
        let h: Header = serde_json::from_str(buf.trim_end()).map_err(|e| ForgeError::Format {
            line: 1,
            msg: format!("bad header: {e}"),
        })?;
        if h.format != SCENARIO_FORMAT || h.version != SCENARIO_VERSION {
            return Err(ForgeError::Format {
                line: 1,
                msg: format!(
                    "unsupported {} version {} (expected {SCENARIO_FORMAT} {SCENARIO_VERSION})",
                    h.format, h.version
                ),
            });
        }
        Ok(ScenarioReader {
            input,
            line: 1,
            buf,
        })
    }
}

impl<R: BufRead> Iterator for ScenarioReader<R> {
    type Item = Result<Scenario>;

    fn next(&mut self) -> Option<Result<Scenario>> {
        loop {
            self.buf.clear();
            self.line += 1;
            match self.input.read_line(&mut self.buf) {
                Ok(0) => return None,
                Ok(_) => {}
                Err(e) => return Some(Err(e.into())),
            }
            let text = self.buf.trim_end();
            if text.is_empty() {
                continue;
            }
            let line = self.line;
            return Some(serde_json::from_str(text).map_err(|e| ForgeError::Format {
                line,
                msg: e.to_string(),
            }));
        }
    }
}

pub fn write_scenarios<W: Write>(out: W, scenarios: &[Scenario]) -> Result<()> {
    let mut w = ScenarioWriter::new(out)?;
    for s in scenarios {
        w.write(s)?;
    }
    w.finish()?;
    Ok(())
}

pub fn read_scenarios<R: BufRead>(input: R) -> Result<Vec<Scenario>> {
    ScenarioReader::new(input)?.collect()
}

pub fn save_scenarios(path: &Path, scenarios: &[Scenario]) -> Result<()> {
    write_scenarios(BufWriter::new(File::create(path)?), scenarios)
}

pub fn load_scenarios(path: &Path) -> Result<Vec<Scenario>> {
    read_scenarios(BufReader::new(File::open(path)?))
}

//! Log records go to stderr (filtered by `RUST_LOG`, default `info`) and,
//! once a run directory exists, to its log file at info level.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::Mutex;

use log::{Level, LevelFilter, Log, Metadata, Record};

struct RunLogger {
    stderr: env_logger::Logger,
    file: Mutex<Option<BufWriter<File>>>,
}

static LOGGER: std::sync::OnceLock<RunLogger> = std::sync::OnceLock::new();

impl Log for RunLogger {
    fn enabled(&self, metadata: &Metadata) -> bool {
        metadata.level() <= Level::Info || self.stderr.enabled(metadata)
    }

    fn log(&self, record: &Record) {
        if self.stderr.matches(record) {
            self.stderr.log(record);
        }
        if record.level() <= Level::Info {
            if let Some(w) = self.file.lock().expect("log file lock").as_mut() {
                let _ = writeln!(w, "{} {}", record.level(), record.args());
            }
        }
    }

    fn flush(&self) {
        self.stderr.flush();
        if let Some(w) = self.file.lock().expect("log file lock").as_mut() {
            let _ = w.flush();
        }
    }
}

pub fn init() {
    let logger = LOGGER.get_or_init(|| RunLogger {
        stderr: env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
            .format_timestamp(None)
            .build(),
        file: Mutex::new(None),
    });
    if log::set_logger(logger).is_ok() {
        log::set_max_level(LevelFilter::max());
    }
}

/// Starts mirroring records into `path`, replacing any earlier file.
pub fn attach_file(path: &Path) -> std::io::Result<()> {
    let file = File::create(path)?;
    if let Some(logger) = LOGGER.get() {
        *logger.file.lock().expect("log file lock") = Some(BufWriter::new(file));
    }
    Ok(())
}

pub fn flush() {
    log::logger().flush();
}

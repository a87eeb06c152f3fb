//! TCP side of the decoder: a server replaying a recording as EEGF frames,
//! and a client that decodes such a stream live.

use std::io::{BufWriter, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::mpsc::{sync_channel, Receiver};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use motorintent::dsp::SignalBlock;
use motorintent::harness::LatencyStats;
use motorintent::model::DecoderModel;
use motorintent::online::wire::{write_frame, write_header, FrameReader, WireError};
use motorintent::online::{CommandGate, Event, PredictorState};
use serde::Serialize;

use crate::error::CliError;

/// Frames buffered between the socket reader and the decoder. When full,
/// the reader blocks and TCP flow control pushes back on the sender.
pub const QUEUE_FRAMES: usize = 1024;

pub struct ServeOptions {
    pub port: u16,
    /// Frames per second; 0 sends as fast as the client reads.
    pub rate: f64,
    pub looped: bool,
}

/// Accepts one client and streams `rows` to it. Returns the number of
/// frames sent; a client hanging up ends the session normally.
pub fn serve(rows: &SignalBlock, options: &ServeOptions) -> Result<u64, CliError> {
    let listener =
        TcpListener::bind(("127.0.0.1", options.port)).map_err(|e| CliError::io("bind", e))?;
    let addr = listener.local_addr().map_err(|e| CliError::io("bind", e))?;
    // Announced on stdout so scripts (and tests) can find an ephemeral port.
    println!("listening on {addr}");
    let _ = std::io::stdout().flush();
    let (socket, peer) = listener.accept().map_err(|e| CliError::io("accept", e))?;
    log::info!("client {peer} connected");
    socket.set_nodelay(true).ok();
    let n = u16::try_from(rows.n_channels())
        .map_err(|_| CliError::Config("too many channels for the wire format".into()))?;
    let mut out = BufWriter::new(socket);

    let sent = (|| -> std::io::Result<u64> {
        write_header(&mut out, n)?;
        let started = Instant::now();
        let mut index: u64 = 0;
        loop {
            for row in rows.rows() {
                if options.rate > 0.0 {
                    let due = started + Duration::from_secs_f64(index as f64 / options.rate);
                    out.flush()?;
                    if let Some(wait) = due.checked_duration_since(Instant::now()) {
                        thread::sleep(wait);
                    }
                }
                write_frame(&mut out, index as u32, row)?;
                index += 1;
            }
            if !options.looped {
                break;
            }
        }
        out.flush()?;
        Ok(index)
    })();
    match sent {
        Ok(k) => Ok(k),
        Err(e)
            if matches!(
                e.kind(),
                std::io::ErrorKind::BrokenPipe | std::io::ErrorKind::ConnectionReset
            ) =>
        {
            log::info!("client hung up");
            Ok(0)
        }
        Err(e) => Err(CliError::io("send", e)),
    }
}

#[derive(Debug, Serialize)]
pub struct LiveSummary {
    pub frames: u64,
    pub predictions: u64,
    pub commands: u64,
    /// Frames missing from the sender's index sequence.
    pub dropped_frames: u64,
    pub latency: LatencyStats,
}

enum Message {
    Frame(u32, Vec<f64>),
    Failed(WireError),
}

fn reader_thread(socket: TcpStream, n_expected: usize) -> Result<Receiver<Message>, CliError> {
    let mut reader = FrameReader::new(socket)?;
    if reader.n_channels() != n_expected {
        return Err(CliError::Protocol(format!(
            "stream carries {} channels, the model expects {n_expected}",
            reader.n_channels()
        )));
    }
    let (tx, rx) = sync_channel(QUEUE_FRAMES);
    thread::spawn(move || loop {
        match reader.next_frame() {
            Ok(Some((index, row))) => {
                if tx.send(Message::Frame(index, row)).is_err() {
                    break;
                }
            }
            Ok(None) => break,
            Err(e) => {
                let _ = tx.send(Message::Failed(e));
                break;
            }
        }
    });
    Ok(rx)
}

/// Decodes a live stream, writing one NDJSON event per prediction.
pub fn decode_live<W: Write>(
    model: Arc<DecoderModel>,
    addr: &str,
    delta: f64,
    q: usize,
    gate: CommandGate,
    events: &mut W,
) -> Result<LiveSummary, CliError> {
    let socket = TcpStream::connect(addr)
        .map_err(|e| CliError::Protocol(format!("cannot connect to {addr}: {e}")))?;
    let rx = reader_thread(socket, model.n_channels())?;
    let stream = model
        .preprocessor_with((0..model.n_channels()).collect())?
        .stream()?;
    let mut state = PredictorState::new(model, stream, delta, q)?.with_gate(gate);
    let mut started = false;

    let mut summary = LiveSummary {
        frames: 0,
        predictions: 0,
        commands: 0,
        dropped_frames: 0,
        latency: LatencyStats::default(),
    };
    let mut expected: Option<u32> = None;
    let mut latencies = Vec::new();
    for message in rx {
        let (index, row) = match message {
            Message::Frame(i, r) => (i, r),
            Message::Failed(e) => return Err(e.into()),
        };
        if let Some(want) = expected {
            if index != want {
                let gap = u64::from(index.wrapping_sub(want));
                log::warn!("frame index jumped from {want} to {index}; {gap} frames missing");
                summary.dropped_frames += gap;
            }
        }
        expected = Some(index.wrapping_add(1));
        if !started {
            // Event indices follow the sender's numbering.
            state = state.with_start_index(i64::from(index));
            started = true;
        }
        summary.frames += 1;
        let t0 = Instant::now();
        let out = state.push_sample(&row)?;
        latencies.push(t0.elapsed().as_secs_f64() * 1e6);
        if let Some(p) = out {
            summary.predictions += 1;
            summary.commands += u64::from(p.command.is_some());
            let line = serde_json::to_string(&Event::from(&p)).expect("events serialize");
            writeln!(events, "{line}").map_err(|e| CliError::io("stdout", e))?;
        }
    }
    events.flush().map_err(|e| CliError::io("stdout", e))?;
    summary.latency = LatencyStats::from_samples(latencies);
    Ok(summary)
}

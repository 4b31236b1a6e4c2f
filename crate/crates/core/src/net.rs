//! TCP transport for the federation.
//!
//! The server owns the round loop; clients are stateless workers that
//! regenerate their shard from the job config and run the same
//! `local_train` as the in-process path. Because parameters cross the
//! wire as raw f32 bits and aggregation sorts by client id, a TCP run
//! must produce bitwise-identical results to `fed::run_training` with
//! the same config; the tests assert exactly that.

use std::net::{TcpListener, TcpStream, ToSocketAddrs};
use std::sync::Arc;
use std::time::Duration;

use crate::codec::{read_msg, write_msg, Msg};
use crate::error::{Error, Result};
use crate::fed::{fedavg, local_train, round_stats, ClientUpdate, FedConfig, TrainOutcome};

const IO_TIMEOUT: Duration = Duration::from_secs(60);

fn expect(msg: Msg, want: &'static str) -> Result<Msg> {
    if msg.kind() != want {
        return Err(Error::Protocol(format!(
            "expected {want}, got {}",
            msg.kind()
        )));
    }
    Ok(msg)
}

/// Drives a full federated run over TCP and returns the same outcome as
/// the in-process `run_training`. Expects exactly `cfg.n_clients` clients
/// to connect and introduce themselves with distinct ids; any protocol
/// violation aborts the run.
pub fn serve(listener: &TcpListener, cfg: &FedConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let n = cfg.n_clients as usize;
    let mut streams: Vec<Option<TcpStream>> = (0..n).map(|_| None).collect();
    let mut connected = 0usize;
    while connected < n {
        let (mut stream, _) = listener.accept()?;
        stream.set_read_timeout(Some(IO_TIMEOUT))?;
        stream.set_write_timeout(Some(IO_TIMEOUT))?;
        stream.set_nodelay(true)?;
        let hello = expect(read_msg(&mut stream)?, "hello")?;
        let Msg::Hello { client_id } = hello else {
            unreachable!()
        };
        let slot = streams
            .get_mut(client_id as usize)
            .ok_or_else(|| Error::Protocol(format!("client id {client_id} out of range")))?;
        if slot.is_some() {
            return Err(Error::Protocol(format!(
                "duplicate hello from client {client_id}"
            )));
        }
        write_msg(&mut stream, &Msg::Job(Box::new(cfg.clone())))?;
        *slot = Some(stream);
        connected += 1;
    }
    let mut streams: Vec<TcpStream> = streams.into_iter().map(Option::unwrap).collect();

    let rope = Arc::new(cfg.model.rope_table());
    let eval_batches = cfg.eval_batches();
    let mut params = cfg.init_params();
    let mut history = Vec::with_capacity(cfg.rounds);
    for round in 0..cfg.rounds as u32 {
        for stream in &mut streams {
            write_msg(
                stream,
                &Msg::Global {
                    round,
                    params: params.clone(),
                },
            )?;
        }
        let mut updates = Vec::with_capacity(n);
        for (id, stream) in streams.iter_mut().enumerate() {
            let update = expect(read_msg(stream)?, "update")?;
            let Msg::Update {
                client_id,
                round: got_round,
                n_tokens,
                mean_loss,
                params,
            } = update
            else {
                unreachable!()
            };
            if client_id as usize != id {
                return Err(Error::Protocol(format!(
                    "update from client {client_id} on connection {id}"
                )));
            }
            if got_round != round {
                return Err(Error::Protocol(format!(
                    "client {client_id} answered round {got_round} during round {round}"
                )));
            }
            updates.push(ClientUpdate {
                client_id,
                round,
                n_tokens,
                mean_loss,
                params,
            });
        }
        params = fedavg(&updates)?;
        history.push(round_stats(cfg, round, &updates, &params, &rope, &eval_batches));
    }
    for stream in &mut streams {
        write_msg(stream, &Msg::Done)?;
    }
    Ok(TrainOutcome { params, history })
}

/// Connects to a server, announces `client_id`, and trains rounds until
/// the server says done.
pub fn run_client(addr: impl ToSocketAddrs, client_id: u64) -> Result<()> {
    let mut stream = TcpStream::connect(addr)?;
    stream.set_read_timeout(Some(IO_TIMEOUT))?;
    stream.set_write_timeout(Some(IO_TIMEOUT))?;
    stream.set_nodelay(true)?;

    write_msg(&mut stream, &Msg::Hello { client_id })?;
    let job = expect(read_msg(&mut stream)?, "job")?;
    let Msg::Job(cfg) = job else { unreachable!() };
    cfg.validate()?;
    let shard = cfg.client_shard(client_id);

    loop {
        match read_msg(&mut stream)? {
            Msg::Global { round, params } => {
                let update = local_train(&cfg, &params, &shard, round);
                write_msg(
                    &mut stream,
                    &Msg::Update {
                        client_id: update.client_id,
                        round: update.round,
                        n_tokens: update.n_tokens,
                        mean_loss: update.mean_loss,
                        params: update.params,
                    },
                )?;
            }
            Msg::Done => return Ok(()),
            other => {
                return Err(Error::Protocol(format!(
                    "unexpected {} mid-session",
                    other.kind()
                )))
            }
        }
    }
}

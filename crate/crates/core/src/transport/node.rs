//! One peer of a TCP token ring.
//!
//! Each node listens for its predecessor and connects to its successor;
//! every frame travels the same direction. The run has three phases:
//!
//! 1. Gather: node 0 starts a round-0 PARAMS circuit in which each node
//!    fills in its initial shared parameters.
//! 2. Rounds: TOKEN (position + visit order) followed by PARAMS moves
//!    around the ring. The addressed node trains and advances the token;
//!    every other node forwards both frames untouched.
//! 3. Shutdown: the last holder circulates the final store as a bare PARAMS
//!    frame (everyone saves a checkpoint), then a BYE frame follows it once
//!    around the ring.

use std::io::{BufReader, BufWriter};
use std::net::{TcpListener, TcpStream};
use std::path::PathBuf;
use std::thread;
use std::time::{Duration, Instant};

use log::{debug, info};
use serde::{Deserialize, Serialize};

use super::wire::{check_round, params_from, read_message, send_params, write_message, Hello, MessageType, Token, WireMessage};
use crate::alignment::PeerParameterStore;
use crate::checkpoint::save_checkpoint;
use crate::data::{load_idx, Dataset};
use crate::error::{Error, Result};
use crate::federation::{shared_copy, train_local_ipa, visit_order, FederationConfig, PeerRecord, PeerState};
use crate::metrics::evaluate;
use crate::nn::{ParameterSet, Sgd};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeConfig {
    pub peer: usize,
    pub listen: String,
    pub successor: String,
    pub dims: Vec<usize>,
    pub federation: FederationConfig,
    pub shard_images: PathBuf,
    pub shard_labels: PathBuf,
    pub test_images: PathBuf,
    pub test_labels: PathBuf,
    pub checkpoint: PathBuf,
    /// Per-read limit; must cover every other peer's training time.
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
    #[serde(default = "default_retries")]
    pub connect_retries: u32,
}

fn default_timeout() -> u64 {
    3600
}

fn default_retries() -> u32 {
    400
}

/// What a node saw by the time the ring shut down.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeOutcome {
    /// This peer's evaluation at the end of each round.
    pub records: Vec<PeerRecord>,
    pub store: PeerParameterStore,
}

struct Link {
    inbound: BufReader<TcpStream>,
    outbound: BufWriter<TcpStream>,
}

fn connect(addr: &str, retries: u32) -> Result<TcpStream> {
    let mut last = None;
    for _ in 0..=retries {
        match TcpStream::connect(addr) {
            Ok(s) => return Ok(s),
            Err(e) => last = Some(e),
        }
        thread::sleep(Duration::from_millis(50));
    }
    Err(Error::Protocol(format!(
        "successor {addr} unreachable after {retries} retries: {}",
        last.map(|e| e.to_string()).unwrap_or_default()
    )))
}

fn accept(listener: &TcpListener, timeout: Duration) -> Result<TcpStream> {
    listener.set_nonblocking(true)?;
    let deadline = Instant::now() + timeout;
    loop {
        match listener.accept() {
            Ok((s, _)) => {
                s.set_nonblocking(false)?;
                return Ok(s);
            }
            Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => {
                if Instant::now() > deadline {
                    return Err(Error::Protocol("predecessor never connected".into()));
                }
                thread::sleep(Duration::from_millis(20));
            }
            Err(e) => return Err(e.into()),
        }
    }
}

/// Load the shard and test set named in `cfg`, then run the node.
pub fn run_peer_node(cfg: &NodeConfig) -> Result<NodeOutcome> {
    let data = load_idx(&cfg.shard_images, &cfg.shard_labels)?;
    let test = load_idx(&cfg.test_images, &cfg.test_labels)?;
    let listener = TcpListener::bind(&cfg.listen)?;
    run_node_with(cfg, listener, &data, &test)
}

/// Run with an already bound listener and in-memory data.
pub fn run_node_with(cfg: &NodeConfig, listener: TcpListener, data: &Dataset, test: &Dataset) -> Result<NodeOutcome> {
    let fed = &cfg.federation;
    fed.validate()?;
    let (me, n) = (cfg.peer, fed.num_peers);
    if n < 2 || me >= n {
        return Err(Error::Config(format!("peer {me} of a {n}-node ring")));
    }
    if fed.rounds == 0 {
        return Err(Error::Config("a ring run needs at least one round".into()));
    }
    if fed.stop_at_target && fed.target_accuracy.is_some() {
        return Err(Error::Config(
            "stopping at a target accuracy needs global knowledge; unset target_accuracy or stop_at_target for ring runs".into(),
        ));
    }
    let timeout = Duration::from_secs(cfg.timeout_secs);
    let out = connect(&cfg.successor, cfg.connect_retries)?;
    out.set_nodelay(true)?;
    let inc = accept(&listener, timeout)?;
    inc.set_read_timeout(Some(timeout))?;
    let mut link = Link {
        inbound: BufReader::new(inc),
        outbound: BufWriter::new(out),
    };

    let params = fed.init_params(&cfg.dims, me)?;
    let ours = Hello {
        num_peers: n as u32,
        signature: params.signature(),
    };
    write_message(&mut link.outbound, &WireMessage::new(MessageType::Hello, 0, me, ours.encode()))?;
    let hello = read_message(&mut link.inbound)?;
    if hello.kind != MessageType::Hello {
        return Err(Error::Protocol(format!("expected HELLO, got {:?}", hello.kind)));
    }
    let pred = (me + n - 1) % n;
    if hello.sender as usize != pred {
        return Err(Error::Protocol(format!(
            "HELLO from node {}, expected predecessor {pred}",
            hello.sender
        )));
    }
    Hello::decode(&hello.payload)?.check_against(&ours)?;
    debug!("node {me}: handshake with {pred} done");

    let node = Node {
        cfg,
        me,
        n,
        peer: PeerState {
            sgd: Sgd::new(fed.sgd, &params),
            params,
        },
        data,
        test,
        records: Vec::new(),
        last_round: None,
        link,
    };
    node.run()
}

struct Node<'a> {
    cfg: &'a NodeConfig,
    me: usize,
    n: usize,
    peer: PeerState,
    data: &'a Dataset,
    test: &'a Dataset,
    records: Vec<PeerRecord>,
    last_round: Option<u32>,
    link: Link,
}

enum Held {
    Forwarded,
    Finished(PeerParameterStore),
}

impl Node<'_> {
    fn fed(&self) -> &FederationConfig {
        &self.cfg.federation
    }

    fn send(&mut self, msg: &WireMessage) -> Result<()> {
        write_message(&mut self.link.outbound, msg)
    }

    fn recv(&mut self) -> Result<WireMessage> {
        let msg = read_message(&mut self.link.inbound)?;
        if msg.kind != MessageType::Hello && msg.kind != MessageType::Bye {
            check_round(self.last_round, msg.round)?;
            self.last_round = Some(msg.round);
        }
        Ok(msg)
    }

    /// Put our initial share into slot `me` without counting it as an update.
    fn fill_initial(&self, store: PeerParameterStore) -> Result<PeerParameterStore> {
        let versions = store.versions().to_vec();
        let mut peers = store.into_peers();
        peers[self.me] = shared_copy(&self.peer.params, self.fed(), self.me, 0)?;
        PeerParameterStore::with_versions(peers, versions)
    }

    fn run(mut self) -> Result<NodeOutcome> {
        if self.me == 0 {
            let sig = self.peer.params.signature();
            let blank = PeerParameterStore::new(vec![ParameterSet::zeros(&sig); self.n])?;
            let store = self.fill_initial(blank)?;
            send_params(&mut self.link.outbound, &store, 0, self.me)?;
        }
        let mut finished: Option<PeerParameterStore> = None;
        loop {
            let msg = self.recv()?;
            match msg.kind {
                MessageType::Hello => return Err(Error::Protocol("unexpected HELLO".into())),
                MessageType::Params if msg.round == 0 && finished.is_none() => {
                    let (store, _) = params_from(&msg, None)?;
                    if self.me == 0 {
                        info!("node 0: initial gather complete");
                        if let Held::Finished(s) = self.hold(store, 1, 0)? {
                            finished = Some(s);
                        }
                    } else {
                        let store = self.fill_initial(store)?;
                        send_params(&mut self.link.outbound, &store, 0, msg.sender as usize)?;
                    }
                }
                MessageType::Token => {
                    let token = Token::decode(&msg.payload)?;
                    let params = self.recv()?;
                    if params.round != msg.round {
                        return Err(Error::Protocol("TOKEN and PARAMS rounds differ".into()));
                    }
                    let round = msg.round as usize;
                    let expected: Vec<u32> = visit_order(self.fed(), round).iter().map(|&p| p as u32).collect();
                    if token.order != expected {
                        return Err(Error::Protocol(format!("round {round}: token carries a foreign visit order")));
                    }
                    if token.order.get(token.step as usize) == Some(&(self.me as u32)) {
                        let (store, _) = params_from(&params, None)?;
                        if let Held::Finished(s) = self.hold(store, round, token.step as usize)? {
                            finished = Some(s);
                        }
                    } else {
                        self.send(&msg)?;
                        self.send(&params)?;
                    }
                }
                MessageType::Params => {
                    // the final store on its way around
                    let (store, _) = params_from(&msg, None)?;
                    if msg.sender as usize == self.me {
                        self.send(&WireMessage::new(MessageType::Bye, msg.round as usize, self.me, vec![]))?;
                    } else {
                        save_checkpoint(&store, &self.cfg.checkpoint)?;
                        self.send(&msg)?;
                        finished = Some(store);
                    }
                }
                MessageType::Bye => {
                    if msg.sender as usize != self.me {
                        self.send(&msg)?;
                    }
                    let store = finished.ok_or_else(|| Error::Protocol("BYE before the final store".into()))?;
                    info!("node {}: shutting down", self.me);
                    return Ok(NodeOutcome {
                        records: self.records,
                        store,
                    });
                }
            }
        }
    }

    /// We hold the token at (`round`, `step`): train while the order keeps
    /// naming us, then hand off or, after the last round, start shutdown.
    fn hold(&mut self, mut store: PeerParameterStore, mut round: usize, mut step: usize) -> Result<Held> {
        loop {
            let order = visit_order(self.fed(), round);
            if step == self.n {
                round += 1;
                step = 0;
                if round > self.fed().rounds {
                    let last = self.fed().rounds;
                    save_checkpoint(&store, &self.cfg.checkpoint)?;
                    send_params(&mut self.link.outbound, &store, last, self.me)?;
                    self.last_round = Some(last as u32);
                    return Ok(Held::Finished(store));
                }
                continue;
            }
            if order[step] == self.me {
                let t = Instant::now();
                train_local_ipa(&mut self.peer, self.me, &store, self.data, round, &self.cfg.federation)?;
                let secs = t.elapsed().as_secs_f64();
                let share = shared_copy(&self.peer.params, self.fed(), self.me, round)?;
                store.replace(self.me, share)?;
                let e = evaluate(&self.peer.params, self.test)?;
                self.records.push(PeerRecord {
                    round,
                    peer: self.me,
                    test_accuracy: e.accuracy,
                    test_loss: e.loss,
                    wallclock: secs,
                });
                step += 1;
                continue;
            }
            let token = Token {
                step: step as u32,
                order: order.iter().map(|&p| p as u32).collect(),
            };
            self.send(&WireMessage::new(MessageType::Token, round, self.me, token.encode()))?;
            send_params(&mut self.link.outbound, &store, round, self.me)?;
            self.last_round = Some(round as u32);
            return Ok(Held::Forwarded);
        }
    }
}

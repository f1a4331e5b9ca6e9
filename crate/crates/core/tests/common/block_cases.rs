//! Random dim-4 block instances evaluated by the graph engine and by the
//! loop oracle. Returns the worst absolute deviation per operation.
#![allow(dead_code)]

use unic_core::attention::{Init, Linear, MultiHeadSpec, PosEnc};
use unic_core::blocks::{
    adapter_block_forward, dit_block_forward, inject_cross_attention, mmdit_block_forward, AdapterBlockParams,
    InjectionPacket, JointBlockParams, KeySource, StreamIn, StreamParams,
};
use unic_core::embeddings::{grid_positions, Position, RotaryTable};
use unic_core::numerics::{GradMode, Graph, ParamStore, Tensor};

use super::oracle::{self, mat, max_diff};

const DIM: usize = 4;
const HEADS: usize = 1;

#[derive(Debug, Default, Clone, Copy)]
pub struct BlockErrors {
    pub mmdit: f64,
    pub adapter: f64,
    pub inject: f64,
    pub dit: f64,
}

fn rand(shape: &[usize], seed: u64, label: &str) -> Tensor<f64> {
    Init::new(seed, 1.0).weight(label, shape)
}

fn joint(store: &mut ParamStore<f64>, a: &str, b: &str, init: &Init) -> JointBlockParams {
    JointBlockParams {
        first: StreamParams::register(store, a, DIM, true, true, init).unwrap(),
        second: StreamParams::register(store, b, DIM, true, true, init).unwrap(),
    }
}

/// Runs `cases` random instances and reports the worst deviation for each
/// block operation.
pub fn compare(cases: u64) -> BlockErrors {
    let mut worst = BlockErrors::default();
    for seed in 0..cases {
        let e = one_case(seed);
        worst.mmdit = worst.mmdit.max(e.mmdit);
        worst.adapter = worst.adapter.max(e.adapter);
        worst.inject = worst.inject.max(e.inject);
        worst.dit = worst.dit.max(e.dit);
    }
    worst
}

fn one_case(seed: u64) -> BlockErrors {
    let init = Init::new(1000 + seed, 0.5);
    let mut store = ParamStore::<f64>::new();
    let backbone = joint(&mut store, "bb.txt", "bb.img", &init);
    let adapter = AdapterBlockParams {
        joint: joint(&mut store, "ad.ist", "ad.con", &init),
        cross_q: Linear::register(&mut store, "ad.cross_q", DIM, DIM, true, &init).unwrap(),
        cross_q_txt: None,
    };
    let spec = MultiHeadSpec::new(DIM, HEADS).unwrap();
    let table = RotaryTable::new(DIM / HEADS, 2, 2).unwrap();

    let txt = rand(&[2, DIM], seed, "txt");
    let img = rand(&[3, DIM], seed, "img");
    let ist = rand(&[1, DIM], seed, "ist");
    let con = rand(&[4, DIM], seed, "con");
    let zimg = rand(&[4, DIM], seed, "zimg");
    let src = rand(&[4, DIM], seed, "src");
    let cond = rand(&[1, DIM], seed, "cond");
    let gate = rand(&[1, DIM], seed, "gate");
    let grid = grid_positions(2, 2);
    let mut packet_pos = vec![Position::ORIGIN];
    packet_pos.extend(grid.iter().copied());

    let mut g = Graph::new(&store, GradMode::None);
    let n = |g: &mut Graph<'_, f64>, t: &Tensor<f64>| g.constant(t.clone()).unwrap();
    let (tn, inn, isn, cn, zn, sn, cdn, gn) = (
        n(&mut g, &txt),
        n(&mut g, &img),
        n(&mut g, &ist),
        n(&mut g, &con),
        n(&mut g, &zimg),
        n(&mut g, &src),
        n(&mut g, &cond),
        n(&mut g, &gate),
    );
    let none = |x| StreamIn { x, pos: PosEnc::None };

    let (t2, i2) = mmdit_block_forward(&mut g, &none(tn), &none(inn), cdn, &backbone, &spec, false).unwrap();

    let ist_in = StreamIn {
        x: isn,
        pos: PosEnc::Rope(table.angles(&packet_pos[..1]).unwrap()),
    };
    let con_in = StreamIn {
        x: cn,
        pos: PosEnc::Rope(table.angles(&grid).unwrap()),
    };
    let (a_ist, a_con, packet) = adapter_block_forward(
        &mut g,
        &ist_in,
        &con_in,
        &packet_pos,
        cdn,
        &adapter,
        &spec,
        false,
        KeySource::Both,
    )
    .unwrap();

    let qpos = PosEnc::Rope(table.angles(&grid).unwrap());
    let injected =
        inject_cross_attention(&mut g, zn, sn, &packet, &adapter.cross_q, &spec, &qpos, false, Some(gn)).unwrap();

    let dit_img = rand(&[2, DIM], seed, "dimg");
    let dit_txt = rand(&[2, DIM], seed, "dtxt");
    let (dn, dtn) = (n(&mut g, &dit_img), n(&mut g, &dit_txt));
    let dit = dit_block_forward(&mut g, &none(dn), &none(dtn), cdn, &backbone, &spec, false).unwrap();

    let m = |t: &Tensor<f64>| mat(t.data(), DIM);
    let c = cond.data();
    let o_mm = oracle::joint_block(&store, "bb.txt", "bb.img", &m(&txt), &m(&img), None, c, HEADS);
    let o_ad = oracle::joint_block(
        &store,
        "ad.ist",
        "ad.con",
        &m(&ist),
        &m(&con),
        Some((&packet_pos[..1], &grid)),
        c,
        HEADS,
    );
    let o_inj = oracle::inject(
        &store,
        "ad.cross_q",
        &m(&zimg),
        &m(&src),
        &o_ad.keys,
        &o_ad.values,
        &grid,
        HEADS,
        Some(gate.data()),
    );
    let o_dit = oracle::dit_block(&store, "bb.txt", "bb.img", &m(&dit_img), &m(&dit_txt), c, HEADS);

    let v = |id| g.value(id).data().to_vec();
    BlockErrors {
        mmdit: max_diff(&o_mm.first, &v(t2)).max(max_diff(&o_mm.second, &v(i2))),
        adapter: max_diff(&o_ad.first, &v(a_ist))
            .max(max_diff(&o_ad.second, &v(a_con)))
            .max(max_diff(&o_ad.keys, &v(packet_keys(&packet))))
            .max(max_diff(&o_ad.values, &v(packet.values))),
        inject: max_diff(&o_inj, &v(injected)),
        dit: max_diff(&o_dit, &v(dit.img)),
    }
}

fn packet_keys(p: &InjectionPacket) -> unic_core::numerics::NodeId {
    p.keys
}

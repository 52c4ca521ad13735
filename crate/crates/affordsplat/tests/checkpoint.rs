mod common;

use affordsplat::checkpoint::Checkpoint;
use affordsplat::harness::{predict_entries, evaluation_entries, resolve_split, run_finetune};

#[test]
fn save_load_reproduces_forward_outputs_bit_exactly() {
    let ds = common::small_dataset(4, 8);
    let cfg = common::toy_config(3);
    let split = resolve_split(&cfg, &ds).unwrap();
    let ck = run_finetune(&cfg, &ds, &split, None).unwrap();
    let mut buf = Vec::new();
    ck.write(&mut buf).unwrap();
    let back = Checkpoint::read(buf.as_slice()).unwrap();
    assert_eq!(back, ck);
    let ids: Vec<String> = ds.samples.iter().map(|s| s.id.clone()).collect();
    let entries = evaluation_entries(&ds, &ids, 2).unwrap();
    let a = predict_entries(&ck, &ds, &entries).unwrap();
    let b = predict_entries(&back, &ds, &entries).unwrap();
    let bits = |v: &Vec<Vec<f64>>| v.iter().flatten().map(|x| x.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a), bits(&b));

    let mut extra = buf.clone();
    extra.push(0);
    assert!(Checkpoint::read(extra.as_slice()).is_err());
    assert!(Checkpoint::read(&buf[..buf.len() - 1]).is_err());
}

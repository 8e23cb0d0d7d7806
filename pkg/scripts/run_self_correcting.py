"""Self-correcting process against its oracle likelihood."""

from _common import log_epoch, parser, save

from s2p2.experiments import run_self_correcting

if __name__ == "__main__":
    args = parser(__doc__, n_train=6000, epochs=10).parse_args()
    res = run_self_correcting(n_train=args.n_train, seed=args.seed, epochs=args.epochs, log=log_epoch)
    save(res, args.out, "self_correcting")

"""Trigger/target long-range task against its oracle likelihood."""

from _common import log_epoch, parser, save

from s2p2.experiments import run_long_range

if __name__ == "__main__":
    args = parser(__doc__, n_train=2000, epochs=40).parse_args()
    res = run_long_range(n_train=args.n_train, seed=args.seed, epochs=args.epochs, log=log_epoch)
    save(res, args.out, "long_range")

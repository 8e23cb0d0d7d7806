"""Exponential Hawkes recovery against the closed-form likelihood."""

from _common import log_epoch, parser, save

from s2p2.experiments import run_hawkes

if __name__ == "__main__":
    args = parser(__doc__, n_train=6000, epochs=6).parse_args()
    res = run_hawkes(n_train=args.n_train, seed=args.seed, epochs=args.epochs, log=log_epoch)
    save(res, args.out, "hawkes")

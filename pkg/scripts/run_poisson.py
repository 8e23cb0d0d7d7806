"""Flat-intensity recovery on rate-1 Poisson data."""

from _common import log_epoch, parser, save

from s2p2.experiments import run_poisson

if __name__ == "__main__":
    args = parser(__doc__, n_train=500, epochs=30).parse_args()
    res = run_poisson(n_train=args.n_train, seed=args.seed, epochs=args.epochs, log=log_epoch)
    save(res, args.out, "poisson")

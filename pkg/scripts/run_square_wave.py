"""Square-wave background recovery."""

from _common import log_epoch, parser, save

from s2p2.experiments import run_square_wave

if __name__ == "__main__":
    args = parser(__doc__, n_train=5000, epochs=30).parse_args()
    res = run_square_wave(n_train=args.n_train, seed=args.seed, epochs=args.epochs, log=log_epoch)
    save(res, args.out, "square_wave")

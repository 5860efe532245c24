from tscps.scripts import benchmark_cli


if __name__ == "__main__":
    benchmark_cli()
